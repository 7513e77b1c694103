"""Experiment runners behind the CLI: training jobs, benchmark scenarios,
and the gradient-leakage demo.

Every run carries a config echo sufficient to reproduce it exactly
(:func:`replay_training` rebuilds data, partition, and protocol config from
the echo and reruns).  Scenario runners return a :class:`BenchReport` whose
per-run series feed both the ``bench.csv`` files and the rendered figures.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackKnowledge, RecoveryReport, attack_trace
from .data import (
    SourcePartition,
    SplitSpec,
    load_movielens,
    partition_users,
    split_train_test,
    synth_movielens_like,
    synth_ratings,
    take_first_users,
)
from .errors import ConfigError
from .mf import RatingMatrix, TrainConfig
from .protocol import ProtocolConfig, TrainingResult, capture_tap, run_training
from .wire import frame_size

__all__ = [
    "BenchRun",
    "BenchReport",
    "LeakageDemo",
    "build_dataset",
    "config_echo",
    "replay_training",
    "closed_form_round_bytes",
    "scenario_local_vs_distributed",
    "scenario_horizontal",
    "scenario_vertical",
    "run_leakage_demo",
    "write_bench_csv",
]


def build_dataset(spec: dict) -> RatingMatrix:
    """Materialize a rating matrix from a data spec (part of the config echo)."""
    kind = spec.get("kind")
    if kind == "synthetic":
        R, _, _ = synth_ratings(
            spec["n_users"],
            spec["n_items"],
            spec["rank"],
            noise_sigma=spec.get("noise", 0.0),
            fill_fraction=spec.get("fill", 1.0),
            seed=spec.get("seed", 0),
            unit_norm=spec.get("unit_norm", False),
        )
        if spec.get("take_users"):
            R = take_first_users(R, spec["take_users"])
        return R
    if kind == "movielens-like":
        return synth_movielens_like(
            n_users=spec.get("n_users", 200),
            n_items=spec.get("n_items", 400),
            per_user=spec.get("per_user", 35),
            seed=spec.get("seed", 0),
        )
    if kind == "movielens":
        R = load_movielens(spec["path"]).ratings
        if spec.get("max_users"):
            R = take_first_users(R, spec["max_users"])
        return R
    raise ConfigError(f"unknown data spec kind {kind!r}")


def config_echo(cfg: ProtocolConfig, data_spec: dict, partition_seed: int, split: SplitSpec | None) -> dict:
    """Everything needed to reproduce a run byte for byte."""
    return {
        "mode": cfg.mode,
        "sources": cfg.n_sources,
        "transport": cfg.transport,
        "threads": cfg.threads,
        "frac_bits": cfg.frac_bits,
        "share_seed": cfg.share_seed,
        "train": {
            "dim": cfg.train.dim,
            "learning_rate": cfg.train.learning_rate,
            "reg_user": cfg.train.reg_user,
            "reg_item": cfg.train.reg_item,
            "stop_threshold": cfg.train.stop_threshold,
            "max_epochs": cfg.train.max_epochs,
            "init_seed": cfg.train.init_seed,
        },
        "data": dict(data_spec),
        "partition_seed": partition_seed,
        "split": None
        if split is None
        else {"train_fraction": split.train_fraction, "seed": split.seed},
    }


def _cfg_from_echo(echo: dict) -> ProtocolConfig:
    return ProtocolConfig(
        n_sources=echo["sources"],
        mode=echo["mode"],
        transport=echo["transport"],
        train=TrainConfig(**echo["train"]),
        frac_bits=echo["frac_bits"],
        share_seed=echo["share_seed"],
        threads=echo.get("threads", "single"),
    )


def prepare_run(echo: dict):
    """Rebuild (cfg, partition, held-out test set) from a config echo."""
    cfg = _cfg_from_echo(echo)
    R = build_dataset(echo["data"])
    test = None
    if echo.get("split"):
        R, test = split_train_test(R, SplitSpec(**echo["split"]))
    partition = partition_users(R, cfg.n_sources, seed=echo["partition_seed"])
    return cfg, partition, test


def replay_training(echo: dict) -> TrainingResult:
    """Re-run a finished experiment from its own config echo."""
    cfg, partition, _ = prepare_run(echo)
    return run_training(cfg, partition)


def closed_form_round_bytes(n_sources: int, dim: int, n_items: int, mode: str) -> int:
    """Exact bytes on all channels in one steady round.

    Plain: T broadcasts down plus T gradient uploads.  Shared additionally
    moves T(T-1) share frames between sources.  All frames carry a dim x
    n_items block.
    """
    B = frame_size(dim, n_items)
    if mode == "plain":
        return 2 * n_sources * B
    return n_sources * (n_sources + 1) * B


@dataclass
class BenchRun:
    label: str
    echo: dict
    loss: list[float]
    wall_ms: list[float]
    bytes_per_round: list[int]
    rounds: int
    summary: dict = field(default_factory=dict)

    def median_round_ms(self, skip_warmup: int = 1) -> float:
        tail = self.wall_ms[skip_warmup:] or self.wall_ms
        return float(np.median(tail))


@dataclass
class BenchReport:
    scenario: str
    runs: list[BenchRun]
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "summary": self.summary,
            "runs": [
                {
                    "label": r.label,
                    "config": r.echo,
                    "rounds": r.rounds,
                    "summary": r.summary,
                }
                for r in self.runs
            ],
        }


def write_bench_csv(run: BenchRun, path):
    """Per-round series in the pinned layout: round,loss,wall_ms,bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "loss", "wall_ms", "bytes"])
        for rnd in range(run.rounds):
            lo = run.loss[rnd] if rnd < len(run.loss) else ""
            wm = run.wall_ms[rnd] if rnd < len(run.wall_ms) else ""
            by = run.bytes_per_round[rnd] if rnd < len(run.bytes_per_round) else ""
            w.writerow([rnd, lo, wm, by])


def _execute(label: str, echo: dict) -> BenchRun:
    cfg, partition, _ = prepare_run(echo)
    res = run_training(cfg, partition)
    return BenchRun(
        label=label,
        echo=echo,
        loss=res.metrics.loss_history,
        wall_ms=res.metrics.round_wall_ms,
        bytes_per_round=res.metrics.bytes_per_round,
        rounds=res.metrics.rounds,
        summary={
            "final_loss": res.metrics.loss_history[-1] if res.metrics.loss_history else None,
            "median_round_ms": float(np.median(res.metrics.round_wall_ms[1:] or res.metrics.round_wall_ms)),
            "total_bytes": res.metrics.total_bytes,
            "converged": res.metrics.converged,
        },
    )


def scenario_local_vs_distributed(
    *,
    users_per_source: int = 40,
    n_items: int = 100,
    rank: int = 5,
    dim: int = 5,
    fill: float = 0.3,
    learning_rate: float = 5e-3,
    rounds: int = 150,
    source_counts: tuple[int, ...] = (1, 3, 5),
    data_seed: int = 42,
    init_seed: int = 7,
    partition_seed: int = 1,
    share_seed: int = 3,
) -> BenchReport:
    """Model quality as data sources (each bringing fresh users) are added.

    One master pool of users_per_source * max(T) users is drawn once; the
    T-source run trains on its first users_per_source * T users.  Data is
    noiseless planted rank ``rank`` with homogeneous per-entry variance, so
    final losses of different slices are comparable; regularizers are off
    for the same reason.  Plain mode is used throughout (both modes give
    identical losses; T=1 has no one to share with).
    """
    report = BenchReport("local-vs-distributed", [])
    finals = []
    for T in source_counts:
        echo = config_echo(
            ProtocolConfig(
                T,
                "plain",
                "memory",
                TrainConfig(
                    dim=dim,
                    learning_rate=learning_rate,
                    reg_user=0.0,
                    reg_item=0.0,
                    stop_threshold=1e-12,
                    max_epochs=rounds,
                    init_seed=init_seed,
                ),
                24,
                share_seed=share_seed,
            ),
            {
                "kind": "synthetic",
                "n_users": users_per_source * max(source_counts),
                "n_items": n_items,
                "rank": rank,
                "noise": 0.0,
                "fill": fill,
                "seed": data_seed,
                "unit_norm": True,
                "take_users": users_per_source * T,
            },
            partition_seed,
            None,
        )
        run = _execute(f"T{T}", echo)
        run.summary["sources"] = T
        run.summary["users"] = users_per_source * T
        report.runs.append(run)
        finals.append(run.summary["final_loss"])
    report.summary = {
        "final_losses": dict(zip((f"T{t}" for t in source_counts), finals)),
        "strictly_decreasing": all(a > b for a, b in zip(finals, finals[1:])),
    }
    return report


def scenario_horizontal(
    *,
    n_users: int = 400,
    n_items: int = 500,
    rank: int = 5,
    dim: int = 50,
    fill: float = 0.3,
    learning_rate: float = 1e-4,
    rounds: int = 12,
    source_counts: tuple[int, ...] = (2, 3, 4, 5),
    data_seed: int = 5,
    init_seed: int = 3,
    partition_seed: int = 2,
    share_seed: int = 4,
) -> BenchReport:
    """Per-round wall time, shared vs plain, as the source count grows.

    Fixed data, both modes per T; the summary reports the shared/plain
    ratio of median round times (first round excluded as warm-up).
    """
    report = BenchReport("horizontal", [])
    ratios = {}
    for T in source_counts:
        per_mode = {}
        for mode in ("plain", "shared"):
            echo = config_echo(
                ProtocolConfig(
                    T,
                    mode,
                    "memory",
                    TrainConfig(
                        dim=dim,
                        learning_rate=learning_rate,
                        stop_threshold=1e-12,
                        max_epochs=rounds,
                        init_seed=init_seed,
                    ),
                    24,
                    share_seed=share_seed,
                ),
                {
                    "kind": "synthetic",
                    "n_users": n_users,
                    "n_items": n_items,
                    "rank": rank,
                    "noise": 0.05,
                    "fill": fill,
                    "seed": data_seed,
                },
                partition_seed,
                None,
            )
            run = _execute(f"T{T}_{mode}", echo)
            run.summary["sources"] = T
            run.summary["mode"] = mode
            report.runs.append(run)
            per_mode[mode] = run.median_round_ms()
        ratios[f"T{T}"] = per_mode["shared"] / per_mode["plain"]
    report.summary = {
        "shared_over_plain_ratio": ratios,
        "max_ratio": max(ratios.values()),
    }
    return report


def scenario_vertical(
    *,
    item_counts: tuple[int, ...] = (50, 200, 500),
    source_counts: tuple[int, ...] = (3, 5),
    n_users: int = 120,
    rank: int = 5,
    dim: int = 20,
    fill: float = 0.3,
    learning_rate: float = 1e-4,
    rounds: int = 8,
    data_seed: int = 9,
    init_seed: int = 6,
    partition_seed: int = 2,
    share_seed: int = 8,
) -> BenchReport:
    """Shared-mode cost as the item count (block width) grows.

    Records median round time and verifies measured per-round bytes against
    the closed-form frame arithmetic, exactly.
    """
    report = BenchReport("vertical", [])
    matches = {}
    for T in source_counts:
        for m in item_counts:
            echo = config_echo(
                ProtocolConfig(
                    T,
                    "shared",
                    "memory",
                    TrainConfig(
                        dim=dim,
                        learning_rate=learning_rate,
                        stop_threshold=1e-12,
                        max_epochs=rounds,
                        init_seed=init_seed,
                    ),
                    24,
                    share_seed=share_seed,
                ),
                {
                    "kind": "synthetic",
                    "n_users": n_users,
                    "n_items": m,
                    "rank": rank,
                    "noise": 0.05,
                    "fill": fill,
                    "seed": data_seed,
                },
                partition_seed,
                None,
            )
            run = _execute(f"T{T}_m{m}", echo)
            expected = closed_form_round_bytes(T, dim, m, "shared")
            run.summary.update(
                {
                    "sources": T,
                    "items": m,
                    "round_bytes": run.bytes_per_round[0] if run.bytes_per_round else None,
                    "expected_round_bytes": expected,
                }
            )
            matches[f"T{T}_m{m}"] = all(b == expected for b in run.bytes_per_round)
            report.runs.append(run)
    report.summary = {"bytes_match_closed_form": matches, "all_match": all(matches.values())}
    return report


@dataclass
class LeakageDemo:
    """One mode's capture plus the recovery report scored against truth."""

    mode: str
    report: RecoveryReport
    capture: bytes
    knowledge: AttackKnowledge
    echo: dict


def run_leakage_demo(
    *,
    n_items: int = 20,
    dim: int = 4,
    rounds: int = 3,
    seed: int = 0,
    frac_bits: int = 24,
    reg_item: float = 0.0,
    modes: tuple[str, ...] = ("plain", "shared"),
) -> dict[str, LeakageDemo]:
    """Train a two-source run where the victim source holds a single user,
    capture every frame, and attack the capture in each requested mode.

    With ``reg_item = 0`` gradient columns have the cleanly invertible
    single-user form; a nonzero value exercises the attacker's stripping of
    the known regularizer term.  Ratings are integers on the 1..5 scale.
    """
    rng = np.random.default_rng(seed)
    values = rng.integers(1, 6, size=(2, n_items)).astype(np.float64)
    partition = [
        SourcePartition(
            RatingMatrix(
                1,
                n_items,
                np.zeros(n_items, dtype=np.int64),
                np.arange(n_items, dtype=np.int64),
                values[t],
            ),
            np.array([t], dtype=np.int64),
        )
        for t in (0, 1)
    ]
    out: dict[str, LeakageDemo] = {}
    for mode in modes:
        cfg = ProtocolConfig(
            2,
            mode,
            "memory",
            TrainConfig(
                dim=dim,
                learning_rate=1e-2,
                reg_user=0.0,
                reg_item=reg_item,
                stop_threshold=1e-12,
                max_epochs=rounds,
                init_seed=seed + 1,
            ),
            frac_bits,
            share_seed=seed + 2,
        )
        store: list = []
        records: list = []
        run_training(cfg, partition, tap=capture_tap(store), probe=records.append)
        capture = b"".join(raw for _, _, raw in store)
        knowledge = AttackKnowledge(
            user_by_round={rec.round: rec.source_U[0][0].copy() for rec in records},
            true_ratings={j: float(values[0, j]) for j in range(n_items)},
            source_id=0,
        )
        report = attack_trace(capture, knowledge, cfg)
        echo = config_echo(cfg, {"kind": "leakage-demo", "n_items": n_items, "seed": seed}, 0, None)
        out[mode] = LeakageDemo(mode=mode, report=report, capture=capture, knowledge=knowledge, echo=echo)
    return out
