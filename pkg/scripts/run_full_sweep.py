"""Run the 34-configuration experiment table on the desk-scale synthetic dataset.

    python3 scripts/run_full_sweep.py --out runs/full --parallelism 4

At the default 50 epochs and 2 repetitions this takes roughly an hour per
core. ``--epochs`` shortens it for a quick look.
"""

import argparse
import logging
import time

from icepll import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/full_sweep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--profile", choices=sorted(ex.PROFILES), default="desk")
    ap.add_argument("--parallelism", type=int, default=1)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--repetitions", type=int, default=2)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    profile = ex.PROFILES[args.profile]
    tcfg = profile.train_config() if args.epochs is None else profile.train_config(epochs=args.epochs)
    dataset = ex.synthetic_dataset(profile.synthetic_spec(), seed=args.seed)
    grid = ex.build_grid(train=tcfg, repetitions=args.repetitions, base_seed=args.seed)

    t0 = time.perf_counter()
    result = ex.run_sweep(grid, dataset, args.parallelism, out_dir=args.out)
    ex.sensitivity_report(result.reports, out_dir=args.out)
    print(f"{len(grid)} configs in {time.perf_counter() - t0:.0f}s -> {args.out}")
    for row in sorted(result.rows, key=lambda r: -r["weighted_f1"])[:5]:
        print(f"  {row['name']:34s} wF1 {row['weighted_f1']:.4f}  test acc {row['test_accuracy']:.4f}")
    print(f"best: {result.best['name']}")


if __name__ == "__main__":
    main()
