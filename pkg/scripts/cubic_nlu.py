"""Cubic sensing model estimated with the nonlinear (NLU) recursion.

Reports the median transformed error, consensus gap and |x - theta| over seeds
at each recorded iteration.
"""
import argparse

import numpy as np

from distest.estimators import run_trials
from distest.scenario import CUBIC_NLU

from _common import build, write_json


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--stride", type=int, default=1000)
    p.add_argument("--beta-a", type=float, default=None, help="override the consensus gain scale")
    p.add_argument("--out", help="optional JSON output path")
    args = p.parse_args()

    changes = {}
    if args.beta_a is not None:
        changes["beta"] = {"a": args.beta_a}
    cfg = build(CUBIC_NLU, **changes)
    traces = [t for t in run_trials(cfg.build_problem(), "nlu", args.iterations, range(args.seeds),
                                    stride=args.stride) if t.diverged_at is None]
    if not traces:
        write_json(args.out, {"diverged": args.seeds})
        return
    med = lambda attr: np.median(np.stack([getattr(t, attr) for t in traces]), axis=0)  # noqa: E731
    write_json(args.out, {
        "iterations": traces[0].iterations,
        "median_transformed_error": med("transformed_error"),
        "median_consensus_gap": med("consensus_gap"),
        "median_max_error": np.median(np.stack([t.max_errors for t in traces]), axis=0),
        "diverged": args.seeds - len(traces),
    })


if __name__ == "__main__":
    main()
