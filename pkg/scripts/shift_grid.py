"""Task accuracy of CEM vs RECEM under each background shift for a few RECEM settings.

    python3 scripts/shift_grid.py --epochs 30 --seeds 0,1 grl_lambda=0.3 beta_max=0.5
Each positional key=value pair is one RECEM setting compared against the same CEM baseline.
"""

import argparse

import numpy as np

from recem.config import RunConfig, parse_value
from recem.experiments import ALL_SHIFTS, evaluate_runs, run_grid


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("settings", nargs="*", help="key=value overrides for RECEM, one setting each")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    base = RunConfig(epochs=args.epochs, seeds=[int(s) for s in args.seeds.split(",")])
    rows = [("CEM", base.with_(variant="CEM")), ("RECEM", base)]
    for item in args.settings:
        key, raw = item.split("=", 1)
        rows.append((f"RECEM {item}", base.with_(**{key: parse_value(key, raw)})))
    print(f"{'model':32s}" + "".join(f"{k.value:>16s}" for k in ALL_SHIFTS))
    for label, cfg in rows:
        reps = evaluate_runs(run_grid([cfg])[0], include=())
        accs = [np.mean([r.shift_accuracy[k.value] for r in reps]) for k in ALL_SHIFTS]
        print(f"{label:32s}" + "".join(f"{a:16.2f}" for a in accs), flush=True)


if __name__ == "__main__":
    main()
