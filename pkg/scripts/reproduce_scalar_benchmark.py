"""Scalar benchmark on the complete graph: closed-form variance against Monte-Carlo.

Runs LU with a = b = 1 and reports the per-sensor empirical variance of
sqrt(i) (x_n(i) - theta) next to the Lyapunov solution, plus how the
closed-form average variance approaches the centralized value as b grows.
"""
import argparse

import numpy as np

from distest.analysis import asymptotic_variance, scalar_example_summary
from distest.estimators import run_trials
from distest.graph import mean_laplacian
from distest.scenario import SCALAR_BENCHMARK

from _common import build, write_json


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--iterations", type=int, default=100_000)
    p.add_argument("--out", help="optional JSON output path")
    args = p.parse_args()

    cfg = build(SCALAR_BENCHMARK)
    problem = cfg.build_problem()
    Lbar = mean_laplacian(problem.links)
    rep = asymptotic_variance(1.0, cfg.gain, Lbar, problem.model, problem.theta)
    traces = run_trials(problem, "lu", args.iterations, range(args.seeds), stride=args.iterations)
    finals = np.stack([t.final_estimates[:, 0] for t in traces if t.diverged_at is None])
    emp = args.iterations * np.var(finals - problem.theta[0], axis=0, ddof=1)

    sweep = {}
    for b in (1.0, 10.0, 100.0, 1e4):
        s = scalar_example_summary(Lbar.n_nodes, 1.0, 1.0, 1.0, b, Lbar)
        sweep[str(b)] = s.s_lu
    write_json(args.out, {
        "per_sensor_variance_closed_form": float(rep.s_nn[0, 0, 0]),
        "per_sensor_variance_empirical": emp,
        "mean_sensor_variance_vs_b": sweep,
        "centralized": 1.0 / Lbar.n_nodes,
        "trials": len(finals),
    })


if __name__ == "__main__":
    main()
