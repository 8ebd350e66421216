"""One deterministic convex-integration step on the toy schedule.

Writes the artifacts of ``configs/toy.yaml`` and prints the Reynolds stress ratio,
the equation residuals and the inductive-bound table.

    python3 scripts/run_toy.py [--out runs]
"""

import argparse
import csv
from pathlib import Path

from wildflow import cli

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    cfg = cli.load_config(ROOT / "configs" / "toy.yaml", (f"output_dir={args.out}", *args.overrides))
    path = cli.run_experiment(cfg)
    with open(path / "bounds.csv") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    print(f"artifacts: {path}")
    for r in rows:
        print(f"q={r['q']} t={float(r['t']):.4f} {r['norm']:>8}: {float(r['value']):.4g} <= {float(r['bound']):.4g} "
              f"{'ok' if r['pass'] == 'true' else 'VIOLATED'}")
    for line in (path / "summary.csv").read_text().splitlines()[2:]:
        print(line)


if __name__ == "__main__":
    main()
