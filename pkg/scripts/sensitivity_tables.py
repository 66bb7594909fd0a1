"""Print alpha x gamma tables from a finished sweep directory.

    python3 scripts/sensitivity_tables.py runs/full_sweep --metric weighted_f1
"""

import argparse
import json
from pathlib import Path

from icepll import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sweep_dir")
    ap.add_argument("--metric", default="weighted_f1", choices=ex.SENSITIVITY_METRICS)
    args = ap.parse_args()

    out = Path(args.sweep_dir)
    reports = [ex.RunReport.from_dict(json.loads(p.read_text())) for p in sorted((out / "reports").glob("*.json"))]
    tables = ex.sensitivity_report(reports, out_dir=out)["tables"]
    for enc, t in tables.items():
        print(f"\n{enc}: {args.metric}")
        print("alpha \\ gamma " + "".join(f"{g:>9g}" for g in t["gammas"]))
        for a, row in zip(t["alphas"], t["metrics"][args.metric]):
            print(f"{a:>13g} " + "".join(f"{v:9.4f}" for v in row))


if __name__ == "__main__":
    main()
