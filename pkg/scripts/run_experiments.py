"""Run named experiments and write their CSV/SVG reports.

    python3 scripts/run_experiments.py                      # every experiment, defaults
    python3 scripts/run_experiments.py shift leakage --epochs 60 --out runs/accept
"""

import argparse
import time
from pathlib import Path

from recem.config import EXPERIMENTS, RunConfig
from recem.experiments import run_experiment
from recem.report import emit_report


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", metavar="NAME", help=f"any of {', '.join(EXPERIMENTS)} (default: all)")
    ap.add_argument("--epochs", type=int, default=RunConfig.epochs)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    unknown = sorted(set(args.names) - set(EXPERIMENTS))
    if unknown:
        ap.error(f"unknown experiments: {unknown}")
    cfg = RunConfig(epochs=args.epochs, seeds=[int(s) for s in args.seeds.split(",")], out_dir=args.out)
    for name in args.names or EXPERIMENTS:
        t0 = time.perf_counter()
        result = run_experiment(name, cfg)
        paths = emit_report(result, Path(args.out) / name)
        print(f"{name}: {len(paths)} files in {time.perf_counter() - t0:.0f}s")
        for table in result.tables:
            print("  " + ",".join(table.header))
            for row in table.rows:
                print("  " + ",".join(f"{v:.2f}" if isinstance(v, float) else str(v) for v in row))


if __name__ == "__main__":
    main()
