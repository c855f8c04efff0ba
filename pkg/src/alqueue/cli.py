"""``alqueue`` command line: world / run / reorder / compare / replay / presets."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness as hz
from .acquisition import AcquisitionSpec
from .core import read_dataset_csv


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, _, v = text.partition("=")
    return k.strip(), v.strip()


def cmd_world(args) -> int:
    b = hz.make_world(args.seed, args.out)
    cal = b.world.calibration
    print(f"world seed={args.seed} -> {args.out}")
    print(f"  reference={len(b.pretrain)} holdout={len(b.holdout)} pool={len(b.pool)}")
    print(f"  stable rate (check sample) {cal['stable_rate_check']:.4f}, mean S_SA {cal['mean_sa']:.4f}")
    return 0


def cmd_run(args) -> int:
    overrides = dict(args.set or [])
    if args.n_target is not None:
        overrides["n_target"] = args.n_target
    if args.mode is not None:
        overrides["mode"] = args.mode
    r = hz.run_preset(args.preset, args.seed, args.out, args.world, config_file=args.config,
                      overrides=overrides, checkpoints=args.checkpoints)
    last = r.metrics[-1]
    rmse = "n/a" if last.holdout_rmse is None else f"{last.holdout_rmse:.4f}"
    print(f"{args.preset} seed={args.seed}: simulated={len(r.d_s)} stable={len(r.d_s_star)} "
          f"R_T={last.stable_fraction:.3f} holdout_rmse={rmse} ({r.wall_seconds:.1f}s)")
    for stage, share in r.ledger.shares().items():
        print(f"  {stage:10s} {r.ledger.seconds[stage]:12.1f} s  {100 * share:6.2f}%")
    return 0


def cmd_reorder(args) -> int:
    pool_path = Path(args.pool)
    bundle = hz.load_world(pool_path.parent)
    pool = read_dataset_csv(pool_path, bundle.world.build_candidates)
    holdout = bundle.holdout if args.holdout is None else read_dataset_csv(args.holdout, bundle.world.build_candidates)
    names = hz.REORDER_PRESETS if args.strategy == "all" else [args.strategy]
    out = Path(args.out)
    lines = []
    for name in names:
        preset = hz.get_preset(name)
        if preset.workflow:
            raise SystemExit(f"{name!r} is a workflow preset; reorder strategies: {', '.join(hz.REORDER_PRESETS)}")
        spec = AcquisitionSpec(**preset.deltas["acquisition"])
        series = hz.reorder_experiment(pool, spec, args.batch, args.warm, range(args.seeds), holdout, name=name)
        hz.write_reorder(series, out)
        n, cum, err = hz.mean_series(series)
        i = series[0].at(len(pool) // 2)
        line = (f"{name:17s} at {n[i]} acquired: cum_stable={cum[i]:.1f} holdout_rmse={err[i]:.4f} "
                f"mean_rmse_to_half={err[:i + 1].mean():.4f}")
        print(line)
        lines.append(line)
    (out / "reorder_summary.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_compare(args) -> int:
    cmp = hz.compare_runs(args.dirs, args.out)
    sys.stdout.write(cmp.text())
    return 0


def cmd_replay(args) -> int:
    rows, same = hz.replay(args.dir, args.out)
    target = args.out or str(Path(args.dir) / "metrics.replay.csv")
    print(f"replayed {len(rows)} metric rows -> {target}; "
          f"{'identical to' if same else 'DIFFERS from'} metrics.csv")
    return 0 if same else 1


def cmd_presets(args) -> int:
    for name, p in hz.PRESETS.items():
        kind = "reorder " if not p.workflow else ("AL      " if p.active_learning else "control ")
        print(f"{name:20s} {kind} {p.description}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="alqueue", description="Active-learning queue prioritization simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("world", help="create a calibrated world with reference, holdout and pool files")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_world)

    p = sub.add_parser("run", help="run one workflow preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--world", help="world directory (created under OUT/world from the seed if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-target", type=int)
    p.add_argument("--mode", choices=("des", "parallel"))
    p.add_argument("--config", help="flat key = value file; CLI flags override it")
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--checkpoints", choices=("all", "stride", "none"), default="stride")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("reorder", help="offline reordering experiment over a labelled pool")
    p.add_argument("--pool", required=True, help="pool.csv inside a world directory")
    p.add_argument("--holdout", help="holdout csv (default: the world's holdout.csv)")
    p.add_argument("--strategy", required=True, help="reorder preset name or 'all'")
    p.add_argument("--batch", type=int, default=200)
    p.add_argument("--warm", type=int, default=200)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_reorder)

    p = sub.add_parser("compare", help="compare completed run directories")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", help="write comparison csv/txt here")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("replay", help="recompute metrics.csv from events.csv")
    p.add_argument("dir")
    p.add_argument("--out", help="output path (default DIR/metrics.replay.csv)")
    p.set_defaults(fn=cmd_replay)

    p = sub.add_parser("presets", help="list presets")
    p.set_defaults(fn=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"alqueue: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
