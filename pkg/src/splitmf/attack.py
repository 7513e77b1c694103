"""Rating recovery from captured item-gradient traffic.

For a single-user source with no item regularizer, column j of the item
gradient is -2 * e_ij * u_i, so one well-conditioned component k inverts
the residual, and adding back <u_i, v_j> yields the rating.  This is the
honest-but-curious server's view of plain-mode traffic: it already holds
every v_j (it broadcast V) and here is additionally granted the victim's
profile u_i, the strongest observer the scheme must survive.

Applied to shared-mode traffic the identical procedure reads hybrid
blocks, which are uniform ring noise, and recovery collapses; the gap is
what the secret-sharing layer buys.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTraceError, IllConditionedError
from .sharing import decode
from .wire import MsgType, SERVER_SENDER, iter_frames

__all__ = [
    "PIVOT_TOLERANCE",
    "AttackObservation",
    "AttackKnowledge",
    "RecoveryReport",
    "recover_residual",
    "recover_rating",
    "attack_trace",
]

PIVOT_TOLERANCE = 1e-9


def recover_residual(grad_col: np.ndarray, u: np.ndarray, k: int) -> float:
    """Invert one gradient component: e_ij = G_j[k] / (-2 u[k]).

    ``grad_col`` must be the unregularized, unscaled single-user gradient
    column; strip any learning-rate or regularizer contribution first.
    """
    grad_col = np.asarray(grad_col, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if grad_col.shape != u.shape or grad_col.ndim != 1:
        raise IllConditionedError("gradient column and profile must be same-length vectors")
    if abs(u[k]) <= PIVOT_TOLERANCE:
        raise IllConditionedError(
            f"profile component {k} is {u[k]:.3e}, too small to invert; pick another k"
        )
    return float(grad_col[k] / (-2.0 * u[k]))


def recover_rating(grad_col: np.ndarray, u: np.ndarray, v: np.ndarray, k: int) -> float:
    """Recovered rating: inverted residual plus the predicted score <u, v>."""
    return recover_residual(grad_col, u, k) + float(np.dot(u, v))


@dataclass(frozen=True)
class AttackObservation:
    """One captured gradient column plus what the observer knows."""

    round: int
    grad_col: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def best_pivot(self) -> int:
        return int(np.argmax(np.abs(self.u)))

    def recover(self, k: int | None = None) -> float:
        return recover_rating(self.grad_col, self.u, self.v, self.best_pivot() if k is None else k)


@dataclass
class AttackKnowledge:
    """What the curious server is granted about the victim source.

    ``user_by_round`` maps a round to the victim's post-update profile (the
    one its gradient that round was computed with); ``true_ratings`` is the
    ground truth used only to score recovery.
    """

    user_by_round: dict[int, np.ndarray]
    true_ratings: dict[int, float]
    source_id: int = 0


@dataclass
class RecoveryReport:
    mode: str
    round: int
    pivot: int
    recovered: dict[int, float]
    abs_errors: dict[int, float] = field(default_factory=dict)
    mean_abs_error: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "round": self.round,
            "pivot": self.pivot,
            "recovered": {str(k): v for k, v in self.recovered.items()},
            "abs_errors": {str(k): v for k, v in self.abs_errors.items()},
            "mean_abs_error": self.mean_abs_error,
        }


_GRADIENT_TYPES = {MsgType.PLAIN_GRADIENT: "plain", MsgType.HYBRID_GRADIENT: "shared"}


def attack_trace(frames, knowledge: AttackKnowledge, cfg) -> RecoveryReport:
    """Run the recovery procedure against a captured trace.

    ``frames`` is either a raw capture buffer (concatenated wire frames) or
    an iterable of decoded messages.  ``cfg`` supplies the learning rate,
    item regularizer, and source count used to strip known scale factors.
    The same code path handles plain and shared traffic; only the observed
    message type differs.
    """
    if isinstance(frames, (bytes, bytearray)):
        frames = iter_frames(bytes(frames))
    broadcasts: dict[int, np.ndarray] = {}
    uploads: dict[int, tuple[str, np.ndarray]] = {}
    for msg in frames:
        if msg.msg_type == MsgType.MODEL_BROADCAST and msg.sender == SERVER_SENDER:
            broadcasts[msg.round] = decode(msg.payload)
        elif msg.msg_type in _GRADIENT_TYPES and msg.sender == knowledge.source_id:
            # Hybrid payloads are uniform over the ring; decode unchecked.
            uploads.setdefault(
                msg.round,
                (_GRADIENT_TYPES[msg.msg_type], decode(msg.payload, check_headroom=False)),
            )
    usable = sorted(set(uploads) & set(broadcasts) & set(knowledge.user_by_round))
    if not usable:
        raise EmptyTraceError(
            "capture holds no round with a gradient upload, a model broadcast, "
            "and a known victim profile"
        )
    rnd = usable[0]
    mode, G = uploads[rnd]
    V = broadcasts[rnd]
    u = np.asarray(knowledge.user_by_round[rnd], dtype=np.float64)
    alpha = cfg.train.learning_rate
    reg_term = 2.0 * cfg.train.reg_item / cfg.n_sources
    pivot = int(np.argmax(np.abs(u)))
    recovered: dict[int, float] = {}
    abs_errors: dict[int, float] = {}
    for item, truth in sorted(knowledge.true_ratings.items()):
        grad_col = G[:, item] / alpha - reg_term * V[:, item]
        value = recover_rating(grad_col, u, V[:, item], pivot)
        recovered[item] = value
        abs_errors[item] = abs(value - truth)
    report = RecoveryReport(
        mode=mode,
        round=rnd,
        pivot=pivot,
        recovered=recovered,
        abs_errors=abs_errors,
        mean_abs_error=float(np.mean(list(abs_errors.values()))),
    )
    return report
