"""Two convex-integration steps with resolved jets at both levels (128^3).

Uses ``configs/two_step.yaml`` (lambda = 8, 16, 32 on a short horizon) and prints
the per-level stress norms and equation residuals.  Needs about 8 GB of memory:
one level-1 evaluation alone peaks near 5 GB on 128^3.

    python3 scripts/two_step.py [--out runs]
"""

import argparse
from pathlib import Path

from wildflow import cli
from wildflow import engine as E

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    cfg = cli.load_config(ROOT / "configs" / "two_step.yaml", (f"output_dir={args.out}",))
    levels, _ = cli._levels(cfg)
    t = cfg.options().residual_times
    prev = None
    for s in levels:
        norm = E.reynolds_ctl1(s)
        res = E.residual_check(s, t).max
        ratio = "" if prev is None else f"  ratio to previous {norm / prev:.4g}"
        print(f"q={s.q}: lambda={s.schedule.lam(s.q):g} ||R||_CtL1={norm:.6g} residual={res:.2e}{ratio}")
        prev = norm


if __name__ == "__main__":
    main()
