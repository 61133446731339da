"""Ring with link erasures and a coarse quantizer: dithered versus plain rounding.

For each variant, prints quantiles of the max-sensor error at the recorded
iterations and the number of diverged trials.
"""
import argparse

import numpy as np

from distest.estimators import run_trials
from distest.scenario import LOSSY_QUANTIZED

from _common import build, write_json


def summarize(traces):
    ok = [t for t in traces if t.diverged_at is None]
    out = {"diverged": len(traces) - len(ok)}
    if ok:
        errs = np.stack([t.max_errors for t in ok])
        out["iterations"] = ok[0].iterations
        out["median_max_error"] = np.median(errs, axis=0)
        out["q90_max_error"] = np.quantile(errs, 0.9, axis=0)
    return out


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--stride", type=int, default=10_000)
    p.add_argument("--step", type=float, default=0.1, help="quantizer step")
    p.add_argument("--out", help="optional JSON output path")
    args = p.parse_args()

    result = {}
    for dithered in (True, False):
        cfg = build(LOSSY_QUANTIZED, quantizer={"step": args.step, "dithered": dithered})
        traces = run_trials(cfg.build_problem(), "lu", args.iterations, range(args.seeds), stride=args.stride)
        result["dithered" if dithered else "plain_rounding"] = summarize(traces)
    write_json(args.out, result)


if __name__ == "__main__":
    main()
