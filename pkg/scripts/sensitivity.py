"""Relative performance along the depth, branching and offline-size axes.

    python3 scripts/sensitivity.py --seeds 0 1 2 3 4 5 6 7 8 9
"""

import argparse
import json
from pathlib import Path

from mdts import cli


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--task", default="tfb-synth-8")
    p.add_argument("--predictor", default="empirical")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    p.add_argument("--axes", nargs="+", default=sorted(cli.SWEEP_AXES), choices=sorted(cli.SWEEP_AXES))
    p.add_argument("--out", default="results/sensitivity")
    args = p.parse_args()
    cfg = cli.RunConfig().with_overrides({"task.name": args.task, "predictor.kind": args.predictor,
                                          "run.seeds": args.seeds})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis in args.axes:
        summary = cli.sweep(cfg, axis)
        (out / f"{axis}.json").write_text(json.dumps(summary, indent=1, default=str) + "\n")
        cells = "  ".join(f"{v}: {summary['relative'][v]:.3f}" for v in summary["mean_best"])
        print(f"{axis:<13} {cells}")


if __name__ == "__main__":
    main()
