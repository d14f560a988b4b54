"""Full search vs. direct sampling (same call budget) vs. no task description.

The built-in predictors ignore the prompt text, so the no-template row only
differs from the full method when a remote model is configured
(``--predictor remote`` with ``MDTS_REMOTE_URL`` set).

    python3 scripts/ablations.py --seeds 0 1 2 3 4 5 6 7 8 9
"""

import argparse

import numpy as np

from mdts import cli
from mdts.bench import normalize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--task", default="tfb-synth-8")
    p.add_argument("--predictor", default="empirical")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    args = p.parse_args()
    base = cli.RunConfig().with_overrides({"task.name": args.task, "predictor.kind": args.predictor,
                                           "run.seeds": args.seeds})
    task = cli.make_task(base)
    variants = {
        "full": {"run.method": "mdts"},
        "w/o search": {"run.method": "no-mdts"},
        "w/o template": {"run.method": "mdts", "run.no_template": True},
    }
    for name, over in variants.items():
        done, failed = cli.execute(base.with_overrides(over))
        best = [max(normalize(task.oracle(d), task) for d in r.designs) for r in done.values() if r.designs]
        calls = [r.counters.get("ablation_fill_calls", r.counters.get("fill_calls")) for r in done.values()]
        print(f"{name:<13} best {np.mean(best):.3f} ± {np.std(best, ddof=1):.3f}  "
              f"mean fill calls {np.mean(calls):.0f}  failed {sorted(failed)}")


if __name__ == "__main__":
    main()
