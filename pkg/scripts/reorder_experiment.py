"""Offline reordering over the default world's labelled pool, all five strategies.

Prints the seed-averaged stable count and holdout RMSE at a few budget
fractions and writes the per-seed curves to OUT.
"""

import argparse
import time

from alqueue import harness as hz
from alqueue.acquisition import AcquisitionSpec

FRACTIONS = (0.1, 0.25, 0.5, 0.75, 1.0)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--world-seed", type=int, default=0)
    ap.add_argument("--batch", type=int, default=200)
    ap.add_argument("--warm", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="reorder_out")
    args = ap.parse_args()

    b = hz.make_world(args.world_seed)
    n_pool = len(b.pool)
    print(f"pool {n_pool} records, {sum(r.s_is < 0.25 for r in b.pool)} stable")
    print("strategy".ljust(18) + "".join(f"{f:>22.0%}" for f in FRACTIONS))
    for name in hz.REORDER_PRESETS:
        t0 = time.perf_counter()
        spec = AcquisitionSpec(**hz.get_preset(name).deltas["acquisition"])
        series = hz.reorder_experiment(b.pool, spec, args.batch, args.warm, range(args.seeds), b.holdout, name=name)
        hz.write_reorder(series, args.out)
        n, cum, err = hz.mean_series(series)
        cells = []
        for f in FRACTIONS:
            i = series[0].at(int(f * n_pool))
            cells.append(f"{cum[i]:8.1f} / {err[i]:.4f}")
        print(name.ljust(18) + "".join(f"{c:>22}" for c in cells) + f"   ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
