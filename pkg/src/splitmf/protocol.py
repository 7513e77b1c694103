"""Party state machines and round drivers for federated factorization.

One server owns the item factors V; T data sources own disjoint user rows
and their local user factors.  Every round the server broadcasts V, each
source takes its user step and computes an alpha-scaled item gradient, and
the server applies the decoded sum of what it receives.

Two wire modes:

* plain  - sources send their gradient block directly (fixed-point encoded
  for wire uniformity).  The server sees every individual gradient.
* shared - each source splits its block into T additive ring shares, sends
  one uniform share to every peer, keeps the remainder, and uploads only
  the hybrid (kept share + received shares).  Individual hybrids are
  uniform ring noise; only their T-way sum decodes to the aggregate.

Because ring addition is exact, both modes give the server bitwise
identical V trajectories for the same seeds.

The memory transport runs all parties lockstep on one thread (the
deterministic test mode); ``transport="socket"`` or per-party threading is
handled in :mod:`splitmf.transport`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, EncodingOverflowError, ProtocolError
from .mf import RatingMatrix, TrainConfig, apply_update, grad_item, grad_user, init_factors, loss
from .sharing import (
    HEADROOM_BITS,
    FixedPointBlock,
    ShareRng,
    combine_shares,
    decode,
    derive_source_seed,
    encode,
    split_shares,
)
from .wire import SERVER_SENDER, GradientMessage, MsgType, encode_frame, frame_size

__all__ = [
    "ProtocolConfig",
    "Source",
    "Server",
    "RoundRecord",
    "RunMetrics",
    "TrainingResult",
    "pooled_ratings",
    "run_training",
]


@dataclass(frozen=True)
class ProtocolConfig:
    """Topology and wire parameters for one training run."""

    n_sources: int
    mode: str = "shared"
    transport: str = "memory"
    train: TrainConfig = field(default_factory=TrainConfig)
    frac_bits: int = 24
    share_seed: int = 0
    threads: str = "single"

    def __post_init__(self):
        if self.mode not in ("plain", "shared"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.transport not in ("memory", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.threads not in ("single", "per-party"):
            raise ConfigError(f"unknown threads setting {self.threads!r}")
        if self.mode == "shared" and self.n_sources < 2:
            raise ConfigError("shared mode needs at least 2 sources (one share set offers no hiding)")
        if self.n_sources < 1:
            raise ConfigError("need at least 1 source")
        if self.transport == "socket" and self.threads == "single":
            object.__setattr__(self, "threads", "per-party")


class Source:
    """One data source: local ratings, local user factors, round methods."""

    def __init__(self, source_id: int, ratings: RatingMatrix, U0: np.ndarray, cfg: ProtocolConfig, share_rng=None):
        if U0.shape != (ratings.n_users, cfg.train.dim):
            raise ConfigError(
                f"source {source_id}: U0 shape {U0.shape} does not match "
                f"{ratings.n_users} local users x dim {cfg.train.dim}"
            )
        self.id = source_id
        self.ratings = ratings
        self.U = U0.copy()
        self.cfg = cfg
        self.V: np.ndarray | None = None
        self.round = -1
        self.clamp_events = 0
        self.last_plain_block: FixedPointBlock | None = None
        self._kept: FixedPointBlock | None = None
        if share_rng is None:
            share_rng = ShareRng(derive_source_seed(cfg.share_seed, source_id))
        self.share_rng = share_rng

    def apply_broadcast(self, msg: GradientMessage):
        if msg.msg_type != MsgType.MODEL_BROADCAST:
            raise ProtocolError(f"source {self.id}: expected ModelBroadcast, got {msg.msg_type.name}")
        if self._kept is not None:
            raise ProtocolError(f"source {self.id}: new round started before hybrid was sent")
        self.V = decode(msg.payload)
        self.round = msg.round

    def _local_update(self) -> FixedPointBlock:
        """User step, then the encoded alpha-scaled item gradient to upload."""
        if self.V is None:
            raise ProtocolError(f"source {self.id}: no model broadcast received yet")
        tc = self.cfg.train
        gu = grad_user(self.U, self.V, self.ratings, tc.reg_user)
        self.U = apply_update(self.U, gu, tc.learning_rate)
        if not np.isfinite(self.U).all():
            raise DivergenceError(self.round, f"source {self.id}")
        g = grad_item(self.U, self.V, self.ratings, tc.reg_item, reg_weight=1.0 / self.cfg.n_sources)
        scaled = tc.learning_rate * g
        if not np.isfinite(scaled).all():
            raise DivergenceError(self.round, f"source {self.id}")
        # Per-source magnitude budget so the T-way ring sum stays decodable.
        bound = 2.0 ** (HEADROOM_BITS - self.cfg.frac_bits) / self.cfg.n_sources
        over = np.abs(scaled) >= bound
        if over.any():
            self.clamp_events += int(over.sum())
            scaled = np.clip(scaled, -bound * (1 - 2**-20), bound * (1 - 2**-20))
        block = encode(scaled, self.cfg.frac_bits)
        self.last_plain_block = block
        return block

    def round_plain(self) -> GradientMessage:
        return GradientMessage(MsgType.PLAIN_GRADIENT, self.round, self.id, self._local_update())

    def share_phase(self) -> dict[int, GradientMessage]:
        """Split this round's gradient; returns one uniform share per peer.

        The remainder share (plaintext minus the uniform ones) is the one
        this source keeps for its own hybrid.
        """
        block = self._local_update()
        shares = split_shares(block, self.cfg.n_sources, self.share_rng)
        peers = [j for j in range(self.cfg.n_sources) if j != self.id]
        out = {
            peer: GradientMessage(MsgType.SHARE_EXCHANGE, self.round, self.id, shares[k])
            for k, peer in enumerate(peers)
        }
        self._kept = shares[-1]
        return out

    def hybrid_phase(self, incoming: list[GradientMessage]) -> GradientMessage:
        """Ring-sum of the kept share and exactly one share from every peer."""
        if self._kept is None:
            raise ProtocolError(f"source {self.id}: hybrid phase before share phase")
        seen: dict[int, FixedPointBlock] = {}
        for msg in incoming:
            if msg.msg_type != MsgType.SHARE_EXCHANGE:
                raise ProtocolError(f"source {self.id}: unexpected {msg.msg_type.name} during exchange")
            if msg.round != self.round:
                raise ProtocolError(
                    f"source {self.id}: share from source {msg.sender} is for round "
                    f"{msg.round}, expected {self.round}"
                )
            if msg.sender in seen:
                raise ProtocolError(f"source {self.id}: duplicate share from source {msg.sender}")
            seen[msg.sender] = msg.payload
        expected = {j for j in range(self.cfg.n_sources) if j != self.id}
        missing = expected - seen.keys()
        if missing:
            raise ProtocolError(f"source {self.id}: missing share from source(s) {sorted(missing)}")
        extra = seen.keys() - expected
        if extra:
            raise ProtocolError(f"source {self.id}: share from unexpected source(s) {sorted(extra)}")
        hybrid = combine_shares([self._kept] + [seen[j] for j in sorted(seen)])
        self._kept = None
        return GradientMessage(MsgType.HYBRID_GRADIENT, self.round, self.id, hybrid)


class Server:
    """Aggregation server: owns V, updates it once per complete round."""

    def __init__(self, V0: np.ndarray, cfg: ProtocolConfig):
        self.V = np.array(V0, dtype=np.float64, copy=True)
        self.cfg = cfg
        self.round = 0

    def broadcast(self) -> GradientMessage:
        return GradientMessage(
            MsgType.MODEL_BROADCAST, self.round, SERVER_SENDER, encode(self.V, self.cfg.frac_bits)
        )

    def handle_gradients(self, msgs: list[GradientMessage]) -> bool:
        """Apply the decoded ring-sum to V; True when the stop test fires."""
        expected_type = (
            MsgType.PLAIN_GRADIENT if self.cfg.mode == "plain" else MsgType.HYBRID_GRADIENT
        )
        if len(msgs) != self.cfg.n_sources:
            raise ProtocolError(f"round {self.round}: got {len(msgs)} messages, expected {self.cfg.n_sources}")
        senders = set()
        for msg in msgs:
            if msg.msg_type != expected_type:
                raise ProtocolError(f"round {self.round}: unexpected {msg.msg_type.name} from {msg.sender}")
            if msg.round != self.round:
                raise ProtocolError(
                    f"round mismatch: message from source {msg.sender} is for round "
                    f"{msg.round}, server is at {self.round}"
                )
            senders.add(msg.sender)
        if senders != set(range(self.cfg.n_sources)):
            raise ProtocolError(f"round {self.round}: senders {sorted(senders)} != expected range")
        ordered = sorted(msgs, key=lambda m: m.sender)
        try:
            total = combine_shares([m.payload for m in ordered])
            G = decode(total)
        except EncodingOverflowError as exc:
            raise ProtocolError(f"round {self.round}: aggregate gradient overflowed: {exc}") from exc
        self.V = self.V - G
        if not np.isfinite(self.V).all():
            raise DivergenceError(self.round, "server")
        self.round += 1
        return float(np.linalg.norm(G)) / self.cfg.train.learning_rate < self.cfg.train.stop_threshold

    def done_message(self) -> GradientMessage:
        return GradientMessage(MsgType.DONE, self.round, SERVER_SENDER, None, self.cfg.frac_bits)


@dataclass
class RoundRecord:
    """Per-round probe snapshot (memory transport, single-thread only)."""

    round: int
    server_V: np.ndarray
    broadcast_V: np.ndarray
    source_U: list[np.ndarray]
    plain_blocks: list[FixedPointBlock]


@dataclass
class RunMetrics:
    rounds: int = 0
    converged: bool = False
    loss_history: list[float] = field(default_factory=list)
    round_wall_ms: list[float] = field(default_factory=list)
    bytes_per_round: list[int] = field(default_factory=list)
    bytes_by_channel: dict[str, int] = field(default_factory=dict)
    done_bytes: int = 0
    setup_bytes: int = 0
    clamp_events: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_by_channel.values()) + self.setup_bytes

    def count(self, src: str, dst: str, size: int, rnd: int | None = None):
        key = f"{src}->{dst}"
        self.bytes_by_channel[key] = self.bytes_by_channel.get(key, 0) + size
        if rnd is not None:
            while len(self.bytes_per_round) <= rnd:
                self.bytes_per_round.append(0)
            self.bytes_per_round[rnd] += size

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "converged": self.converged,
            "loss_history": self.loss_history,
            "round_wall_ms": self.round_wall_ms,
            "bytes_per_round": self.bytes_per_round,
            "bytes_by_channel": self.bytes_by_channel,
            "done_bytes": self.done_bytes,
            "setup_bytes": self.setup_bytes,
            "total_bytes": self.total_bytes,
            "clamp_events": self.clamp_events,
        }


@dataclass
class TrainingResult:
    V: np.ndarray
    source_U: list[np.ndarray]
    user_ids: list[np.ndarray]
    metrics: RunMetrics

    def pooled_U(self) -> np.ndarray:
        n = sum(len(ids) for ids in self.user_ids)
        U = np.zeros((n, self.V.shape[0]))
        for ids, Ut in zip(self.user_ids, self.source_U):
            U[ids] = Ut
        return U


def _partition_views(partition):
    """Normalize a partition to parallel (ratings, user_ids) lists."""
    ratings, ids = [], []
    for part in partition:
        if hasattr(part, "ratings"):
            ratings.append(part.ratings)
            ids.append(np.asarray(part.user_ids, dtype=np.int64))
        else:
            ratings.append(part)
            ids.append(None)
    if any(i is None for i in ids):
        if not all(i is None for i in ids):
            raise ConfigError("mix of bare RatingMatrix and SourcePartition inputs")
        # Bare matrices: assume they stack in order.
        offset = 0
        ids = []
        for r in ratings:
            ids.append(np.arange(offset, offset + r.n_users, dtype=np.int64))
            offset += r.n_users
    return ratings, ids


def _validate_partition(ratings, ids):
    if not ratings:
        raise ConfigError("empty partition")
    n_items = ratings[0].n_items
    for r in ratings:
        if r.n_items != n_items:
            raise ConfigError("all sources must share the global item indexing")
    all_ids = np.concatenate(ids)
    if np.unique(all_ids).size != all_ids.size:
        raise ConfigError("partition user sets are not disjoint")
    n_users = int(all_ids.max()) + 1 if all_ids.size else 0
    if np.unique(all_ids).size != n_users:
        raise ConfigError("partition does not cover users 0..n-1")
    return n_users, n_items


def pooled_ratings(partition) -> RatingMatrix:
    """Union of per-source ratings re-indexed by global user id."""
    ratings, ids = _partition_views(partition)
    n_users, n_items = _validate_partition(ratings, ids)
    users = np.concatenate([ids[t][r.users] for t, r in enumerate(ratings)])
    items = np.concatenate([r.items for r in ratings])
    values = np.concatenate([r.values for r in ratings])
    return RatingMatrix(n_users, n_items, users, items, values)


def build_parties(cfg: ProtocolConfig, partition, share_rng_factory=None):
    """Construct server and sources with initialization matching the oracle.

    The global U is drawn once and sliced per source by global user id, so
    a centralized run on the pooled ratings starts from the same point.
    """
    ratings, ids = _partition_views(partition)
    n_users, n_items = _validate_partition(ratings, ids)
    if len(ratings) != cfg.n_sources:
        raise ConfigError(f"partition has {len(ratings)} sources, config says {cfg.n_sources}")
    U_global, V0 = init_factors(n_users, n_items, cfg.train)
    sources = []
    for t, (r, user_ids) in enumerate(zip(ratings, ids)):
        rng = share_rng_factory(t) if share_rng_factory is not None else None
        sources.append(Source(t, r, U_global[user_ids], cfg, share_rng=rng))
    return Server(V0, cfg), sources, ids


def run_training(
    cfg: ProtocolConfig,
    partition,
    *,
    tap=None,
    probe=None,
    share_rng_factory=None,
) -> TrainingResult:
    """Drive rounds to convergence or ``max_epochs``.

    ``tap(src, dst, message)`` observes every frame and ``probe(record)``
    every completed round; both require the single-thread memory driver.
    """
    if cfg.transport == "socket" or cfg.threads == "per-party":
        if tap is not None or probe is not None:
            raise ConfigError("tap/probe hooks require the single-thread memory transport")
        from . import transport

        return transport.threaded_run(cfg, partition, share_rng_factory=share_rng_factory)
    return _lockstep_run(cfg, partition, tap=tap, probe=probe, share_rng_factory=share_rng_factory)


def _lockstep_run(cfg, partition, *, tap=None, probe=None, share_rng_factory=None) -> TrainingResult:
    server, sources, ids = build_parties(cfg, partition, share_rng_factory)
    pooled = pooled_ratings(partition)
    metrics = RunMetrics()
    tc = cfg.train

    def send(src, dst, msg, rnd):
        metrics.count(src, dst, frame_size(*msg.payload.shape) if msg.payload is not None else frame_size(0, 0), rnd)
        if tap is not None:
            tap(src, dst, msg)

    def pooled_loss() -> float:
        U = np.zeros((pooled.n_users, tc.dim))
        for t, src in enumerate(sources):
            U[ids[t]] = src.U
        return loss(U, server.V, pooled, tc.reg_user, tc.reg_item)

    converged = False
    for rnd in range(tc.max_epochs):
        t0 = time.perf_counter()
        bmsg = server.broadcast()
        for src in sources:
            send("server", str(src.id), bmsg, rnd)
            src.apply_broadcast(bmsg)
        if cfg.mode == "plain":
            msgs = []
            for src in sources:
                msg = src.round_plain()
                send(str(src.id), "server", msg, rnd)
                msgs.append(msg)
        else:
            outgoing = {}
            for src in sources:
                outgoing[src.id] = src.share_phase()
                for peer, share in outgoing[src.id].items():
                    send(str(src.id), str(peer), share, rnd)
            msgs = []
            for src in sources:
                incoming = [outgoing[j][src.id] for j in range(cfg.n_sources) if j != src.id]
                msg = src.hybrid_phase(incoming)
                send(str(src.id), "server", msg, rnd)
                msgs.append(msg)
        converged = server.handle_gradients(msgs)
        metrics.round_wall_ms.append((time.perf_counter() - t0) * 1e3)
        metrics.loss_history.append(pooled_loss())
        if probe is not None:
            probe(
                RoundRecord(
                    round=rnd,
                    server_V=server.V.copy(),
                    broadcast_V=sources[0].V.copy(),
                    source_U=[src.U.copy() for src in sources],
                    plain_blocks=[src.last_plain_block for src in sources],
                )
            )
        if converged:
            break
    dmsg = server.done_message()
    for src in sources:
        metrics.count("server", str(src.id), frame_size(0, 0))
        metrics.done_bytes += frame_size(0, 0)
        if tap is not None:
            tap("server", str(src.id), dmsg)
    metrics.rounds = server.round
    metrics.converged = converged
    metrics.clamp_events = sum(src.clamp_events for src in sources)
    return TrainingResult(
        V=server.V,
        source_U=[src.U for src in sources],
        user_ids=list(ids),
        metrics=metrics,
    )


def capture_tap(store: list):
    """A tap that appends raw frame bytes: ``store`` becomes a capture buffer."""

    def _tap(src, dst, msg):
        store.append((src, dst, encode_frame(msg)))

    return _tap
