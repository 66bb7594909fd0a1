"""Per-class recall of confidence-partial + focal(0.25, 1) against one-hot + CCE.

    python3 scripts/compare_encodings.py --repetitions 5 --out runs/compare
"""

import argparse
import json
import statistics
from pathlib import Path

from icepll import experiments as ex
from icepll.labels import CLASS_ABBREV, LabelKind
from icepll.losses import LossConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--parallelism", type=int, default=1)
    args = ap.parse_args()

    profile = ex.PROFILES["desk"]
    tcfg = profile.train_config() if args.epochs is None else profile.train_config(epochs=args.epochs)
    dataset = ex.synthetic_dataset(profile.synthetic_spec(), seed=args.seed)
    grid = [
        ex.ExperimentConfig("partial-focal", LabelKind.ConfidencePartial, LossConfig.focal(0.25, 1), False, tcfg,
                            args.repetitions, args.seed),
        ex.ExperimentConfig("onehot-cce", LabelKind.OneHot, LossConfig.cce(), False, tcfg, args.repetitions,
                            args.seed),
    ]
    result = ex.run_sweep(grid, dataset, args.parallelism, out_dir=args.out)

    medians = {}
    print("median recall over repetitions")
    print(f"{'config':14s}" + "".join(f"{c:>8s}" for c in CLASS_ABBREV))
    for rep in result.reports:
        name = rep.config["name"]
        med = [statistics.median(r.per_class_recall[i] for r in rep.repetitions) for i in range(len(CLASS_ABBREV))]
        medians[name] = med
        print(f"{name:14s}" + "".join(f"{v:8.3f}" for v in med))
    Path(args.out, "median_recall.json").write_text(json.dumps(medians, indent=1))


if __name__ == "__main__":
    main()
