"""Command-line entry point: train, bench, and attack workflows.

Every command writes machine-readable JSON/CSV plus rendered figures into
``--out`` (figures can be disabled with ``--no-figures``).  Exit codes:
0 success, 1 runtime failure (divergence, failed leak expectation),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import plots
from .attack import AttackKnowledge, attack_trace
from .data import global_mean_rmse, rmse
from .errors import ConfigError, ParseError, SplitMFError
from .mf import TrainConfig
from .protocol import ProtocolConfig, pooled_ratings
from .sharing import encode
from .wire import GradientMessage, MsgType, SERVER_SENDER, encode_frame

LEAK_MAE_THRESHOLD = 1e-3


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_json(data, path):
    Path(path).write_text(json.dumps(data, indent=2, default=_json_default) + "\n")


def _parse_synthetic(tokens) -> dict:
    spec = {"kind": "synthetic", "n_users": 120, "n_items": 80, "rank": 8,
            "noise": 0.1, "fill": 0.25, "seed": 0}
    keymap = {"n": ("n_users", int), "m": ("n_items", int), "d": ("rank", int),
              "rank": ("rank", int), "noise": ("noise", float),
              "fill": ("fill", float), "seed": ("seed", int)}
    for tok in tokens or []:
        if "=" not in tok:
            raise ConfigError(f"synthetic parameter {tok!r} is not key=value")
        key, _, val = tok.partition("=")
        if key not in keymap:
            raise ConfigError(f"unknown synthetic parameter {key!r} (have: {', '.join(keymap)})")
        name, cast = keymap[key]
        spec[name] = cast(val)
    return spec


def _add_common_flags(p: argparse.ArgumentParser, mode_choices=("plain", "shared"),
                      mode_default="shared"):
    p.add_argument("--mode", choices=list(mode_choices), default=mode_default)
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--transport", choices=["memory", "socket"], default="memory")
    p.add_argument("--threads", choices=["single", "per-party"], default=None,
                   help="single (deterministic, default for memory) or per-party")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--reg-u", type=float, default=1e-3)
    p.add_argument("--reg-v", type=float, default=1e-3)
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--frac-bits", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--share-seed", type=int, default=None)
    p.add_argument("--partition-seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("splitmf-out"))
    p.add_argument("--no-figures", action="store_true")


def _protocol_config(args, *, epochs=None, dim=None) -> ProtocolConfig:
    train = TrainConfig(
        dim=dim if dim is not None else args.dim,
        learning_rate=args.lr,
        reg_user=args.reg_u,
        reg_item=args.reg_v,
        stop_threshold=args.delta,
        max_epochs=epochs if epochs is not None else args.epochs,
        init_seed=args.seed,
    )
    return ProtocolConfig(
        n_sources=args.sources,
        mode=args.mode,
        transport=args.transport,
        train=train,
        frac_bits=args.frac_bits,
        share_seed=args.share_seed if args.share_seed is not None else args.seed,
        threads=args.threads or ("per-party" if args.transport == "socket" else "single"),
    )


def cmd_train(args) -> int:
    if args.data is not None:
        data_spec = {"kind": "movielens", "path": str(args.data)}
        if args.max_users:
            data_spec["max_users"] = args.max_users
    else:
        data_spec = _parse_synthetic(args.synthetic)
        if "seed" not in (tok.split("=")[0] for tok in (args.synthetic or [])):
            data_spec["seed"] = args.seed
    cfg = _protocol_config(args)
    echo = bench_mod.config_echo(
        cfg,
        data_spec,
        args.partition_seed if args.partition_seed is not None else args.seed,
        split=None,
    )
    echo["split"] = {"train_fraction": args.train_fraction, "seed": args.split_seed
                     if args.split_seed is not None else args.seed}
    cfg, partition, test = bench_mod.prepare_run(echo)
    from .protocol import run_training

    result = run_training(cfg, partition)

    train_pool = pooled_ratings(partition)
    U = result.pooled_U()
    evaluation = {}
    if test is not None and test.nnz:
        final = rmse(U, result.V, test)
        baseline = global_mean_rmse(train_pool, test)
        evaluation = {
            "final_rmse": final,
            "global_mean_rmse": baseline,
            "relative_improvement": (baseline - final) / baseline,
        }

    args.out.mkdir(parents=True, exist_ok=True)
    _write_json(
        {"experiment": "train", "config": echo, "metrics": result.metrics.to_dict(),
         "evaluation": evaluation},
        args.out / "metrics.json",
    )
    final_frame = GradientMessage(
        MsgType.MODEL_BROADCAST,
        result.metrics.rounds,
        SERVER_SENDER,
        encode(result.V, cfg.frac_bits),
    )
    (args.out / "v_final.bin").write_bytes(encode_frame(final_frame))
    if not args.no_figures and result.metrics.loss_history:
        plots.plot_loss_curves(
            {f"{cfg.mode} T={cfg.n_sources}": result.metrics.loss_history},
            args.out / "loss_curve.png",
        )
    print(f"trained {result.metrics.rounds} rounds, "
          f"final loss {result.metrics.loss_history[-1]:.6g}"
          if result.metrics.loss_history else "trained")
    if evaluation:
        print(f"test rmse {evaluation['final_rmse']:.4f} "
              f"(global-mean baseline {evaluation['global_mean_rmse']:.4f})")
    print(f"wrote {args.out / 'metrics.json'}")
    return 0


def _bench_outdir(args, scenario: str) -> Path:
    out = args.out / "bench" / scenario
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_report(report, out: Path, no_figures: bool):
    _write_json(report.to_dict(), out / "summary.json")
    for run in report.runs:
        run_dir = out / run.label
        run_dir.mkdir(exist_ok=True)
        bench_mod.write_bench_csv(run, run_dir / "bench.csv")
    if no_figures:
        return
    if report.scenario == "local-vs-distributed":
        plots.plot_loss_curves(
            {r.label: r.loss for r in report.runs}, out / "loss_curves.png",
            title="training loss vs data sources",
        )
        plots.plot_scaling_lines(
            [r.summary["sources"] for r in report.runs],
            {"final loss": [r.summary["final_loss"] for r in report.runs]},
            out / "final_loss_vs_sources.png",
            xlabel="data sources", ylabel="final training loss",
            title="more sources, more users, lower loss",
        )
    elif report.scenario == "horizontal":
        counts = sorted({r.summary["sources"] for r in report.runs})
        groups = {
            mode: [next(r.median_round_ms() for r in report.runs
                        if r.summary["sources"] == t and r.summary["mode"] == mode)
                   for t in counts]
            for mode in ("plain", "shared")
        }
        plots.plot_grouped_bars(
            [f"T={t}" for t in counts], groups, out / "round_time_vs_sources.png",
            ylabel="median round time (ms)", title="per-round time, plain vs shared",
        )
    elif report.scenario == "vertical":
        counts = sorted({r.summary["sources"] for r in report.runs})
        items = sorted({r.summary["items"] for r in report.runs})
        times = {
            f"T={t}": [next(r.median_round_ms() for r in report.runs
                            if r.summary["sources"] == t and r.summary["items"] == m)
                       for m in items]
            for t in counts
        }
        plots.plot_scaling_lines(items, times, out / "round_time_vs_items.png",
                                 xlabel="items", ylabel="median round time (ms)",
                                 title="shared-mode round time vs item count")
        sizes = {
            f"T={t}": [next(r.summary["round_bytes"] for r in report.runs
                            if r.summary["sources"] == t and r.summary["items"] == m)
                       for m in items]
            for t in counts
        }
        plots.plot_scaling_lines(items, sizes, out / "round_bytes_vs_items.png",
                                 xlabel="items", ylabel="bytes per round",
                                 title="shared-mode traffic vs item count")


def cmd_bench(args) -> int:
    kwargs = {}
    if args.rounds is not None:
        kwargs["rounds"] = args.rounds
    if args.scenario == "local-vs-distributed":
        if args.users_per_source is not None:
            kwargs["users_per_source"] = args.users_per_source
        report = bench_mod.scenario_local_vs_distributed(**kwargs)
    elif args.scenario == "horizontal":
        report = bench_mod.scenario_horizontal(**kwargs)
    else:
        if args.items is not None:
            kwargs["item_counts"] = tuple(int(x) for x in args.items.split(","))
        report = bench_mod.scenario_vertical(**kwargs)
    out = _bench_outdir(args, args.scenario)
    _dump_report(report, out, args.no_figures)
    print(json.dumps(report.summary, indent=2, default=_json_default))
    print(f"wrote {out / 'summary.json'}")
    return 0


def _knowledge_to_json(demo) -> dict:
    return {
        "source_id": demo.knowledge.source_id,
        "sources": demo.echo["sources"],
        "learning_rate": demo.echo["train"]["learning_rate"],
        "reg_item": demo.echo["train"]["reg_item"],
        "dim": demo.echo["train"]["dim"],
        "user_by_round": {str(r): u.tolist() for r, u in demo.knowledge.user_by_round.items()},
        "true_ratings": {str(j): v for j, v in demo.knowledge.true_ratings.items()},
    }


def _knowledge_from_json(raw: dict) -> tuple[AttackKnowledge, ProtocolConfig]:
    knowledge = AttackKnowledge(
        user_by_round={int(r): np.asarray(u, dtype=np.float64)
                       for r, u in raw["user_by_round"].items()},
        true_ratings={int(j): float(v) for j, v in raw["true_ratings"].items()},
        source_id=int(raw.get("source_id", 0)),
    )
    cfg = ProtocolConfig(
        n_sources=int(raw.get("sources", 2)),
        mode="plain",
        train=TrainConfig(
            dim=int(raw.get("dim", 1)),
            learning_rate=float(raw["learning_rate"]),
            reg_item=float(raw.get("reg_item", 0.0)),
        ),
    )
    return knowledge, cfg


def cmd_attack(args) -> int:
    out = args.out / "attack"
    out.mkdir(parents=True, exist_ok=True)

    if args.from_capture is not None:
        knowledge_path = args.knowledge or args.from_capture.with_name("knowledge.json")
        raw = json.loads(Path(knowledge_path).read_text())
        knowledge, cfg = _knowledge_from_json(raw)
        report = attack_trace(Path(args.from_capture).read_bytes(), knowledge, cfg)
        _write_json({"experiment": "attack", "reports": {report.mode: report.to_dict()}},
                    out / "report.json")
        print(f"{report.mode}: mean abs recovery error {report.mean_abs_error:.6g}")
        if args.expect_leak and report.mean_abs_error > LEAK_MAE_THRESHOLD:
            print("expected a leak but recovery failed", file=sys.stderr)
            return 1
        return 0

    modes = ("plain", "shared") if args.mode == "both" else (args.mode,)
    demos = bench_mod.run_leakage_demo(
        n_items=args.items, dim=args.dim, rounds=args.epochs, seed=args.seed, modes=modes
    )
    reports = {}
    for mode, demo in demos.items():
        (out / f"capture_{mode}.bin").write_bytes(demo.capture)
        reports[mode] = demo.report.to_dict()
        print(f"{mode}: mean abs recovery error {demo.report.mean_abs_error:.6g}")
    # The victim's trajectory is mode-independent, so one knowledge file serves
    # every capture.
    _write_json(_knowledge_to_json(next(iter(demos.values()))), out / "knowledge.json")
    _write_json({"experiment": "attack", "reports": reports}, out / "report.json")
    if not args.no_figures:
        plots.plot_recovery_errors(
            {mode: demo.report.abs_errors for mode, demo in demos.items()},
            out / "recovery_error.png",
        )
    print(f"wrote {out / 'report.json'}")
    if args.expect_leak:
        failed = [m for m, d in demos.items() if d.report.mean_abs_error > LEAK_MAE_THRESHOLD]
        if failed:
            print(f"expected a leak but recovery failed on: {', '.join(failed)}", file=sys.stderr)
            return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitmf",
        description="Federated matrix factorization with secret-shared gradient aggregation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training job and write metrics")
    _add_common_flags(p_train)
    p_train.add_argument("--data", type=Path, default=None,
                         help="MovieLens u.data-format ratings file")
    p_train.add_argument("--max-users", type=int, default=None,
                         help="row-subsample the loaded data to the first N users")
    p_train.add_argument("--synthetic", nargs="*", metavar="K=V",
                         help="synthetic data parameters: n= m= d= noise= fill= seed=")
    p_train.add_argument("--train-fraction", type=float, default=0.7)
    p_train.add_argument("--split-seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("bench", help="run a benchmark scenario")
    _add_common_flags(p_bench)
    p_bench.add_argument("--scenario", required=True,
                         choices=["local-vs-distributed", "horizontal", "vertical"])
    p_bench.add_argument("--rounds", type=int, default=None)
    p_bench.add_argument("--users-per-source", type=int, default=None)
    p_bench.add_argument("--items", type=str, default=None,
                         help="comma-separated item counts (vertical scenario)")
    p_bench.set_defaults(func=cmd_bench)

    p_attack = sub.add_parser("attack", help="demonstrate gradient leakage and its fix")
    _add_common_flags(p_attack, mode_choices=("plain", "shared", "both"), mode_default="both")
    p_attack.set_defaults(dim=4, epochs=3)
    p_attack.add_argument("--items", type=int, default=20,
                          help="items rated by the single-user victim source")
    p_attack.add_argument("--expect-leak", action="store_true",
                          help="exit nonzero unless recovery succeeded (CI guard)")
    p_attack.add_argument("--from-capture", type=Path, default=None,
                          help="analyze an existing capture file instead of running the demo")
    p_attack.add_argument("--knowledge", type=Path, default=None,
                          help="knowledge JSON for --from-capture (default: sibling knowledge.json)")
    p_attack.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SplitMFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
