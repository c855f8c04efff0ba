"""Run workflow presets over several seeds on one world and write a comparison.

    python scripts/run_matrix.py --out runs/ --seeds 5 basic-control basic-al
    python scripts/run_matrix.py --out runs/ --all
"""

import argparse
from pathlib import Path

from alqueue import harness as hz


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("presets", nargs="*")
    ap.add_argument("--all", action="store_true", help="every workflow preset")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--world-seed", type=int, default=0)
    ap.add_argument("--n-target", type=int, default=1000)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    names = list(hz.WORKFLOW_PRESETS) if args.all else args.presets
    if not names:
        ap.error("name at least one preset or pass --all")
    out = Path(args.out)
    bundle = hz.make_world(args.world_seed, out / "world")
    dirs = []
    for name in names:
        for seed in range(args.seeds):
            d = out / f"{name}_s{seed}"
            r = hz.run_preset(name, seed, d, bundle=bundle, overrides={"n_target": args.n_target})
            last = r.metrics[-1]
            print(f"{name:20s} seed={seed} stable={len(r.d_s_star):4d} rmse={last.holdout_rmse} "
                  f"prioritize={100 * r.ledger.shares()['Prioritize']:.2f}% ({r.wall_seconds:.0f}s)", flush=True)
            dirs.append(d)
    if len(dirs) > 1:
        print(hz.compare_runs(dirs, out).text())


if __name__ == "__main__":
    main()
