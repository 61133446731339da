"""Command-line interface.

Exit codes: 0 success, 2 validation failure, 3 divergence, 4 IO error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from .estimators import run_trials
from .graph import mean_laplacian
from .models import LinearModel
from .reports import emit_reports, load_runs
from .scenario import (
    SCALAR_BENCHMARK,
    ScenarioConfig,
    ScenarioError,
    parse_scenario,
    validate_scenario,
)

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
_REPORT_ALIASES = {"mse": "mse_decay"}


class _Exit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(path: str) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot read scenario: {exc}") from None
    try:
        return parse_scenario(text)
    except ScenarioError as exc:
        raise _Exit(EXIT_VALIDATION, "\n".join(f"error: {e}" for e in exc.errors)) from None


def _override(cfg: ScenarioConfig, args) -> ScenarioConfig:
    d = cfg.to_dict()
    if getattr(args, "algorithm", None):
        d["algorithm"] = args.algorithm
    if getattr(args, "iterations", None) is not None:
        d["run"]["iterations"] = args.iterations
    if getattr(args, "seeds", None):
        d["run"]["seeds"] = args.seeds
    if getattr(args, "stride", None) is not None:
        d["run"]["stride"] = args.stride
    try:
        return parse_scenario(d)
    except ScenarioError as exc:
        raise _Exit(EXIT_VALIDATION, "\n".join(f"error: {e}" for e in exc.errors)) from None


def _check(cfg: ScenarioConfig, quiet: bool = False):
    rep = validate_scenario(cfg)
    if not quiet:
        for w in rep.warnings:
            _err(f"warning: {w}")
    if not rep.ok:
        raise _Exit(EXIT_VALIDATION, "\n".join(f"error: {e}" for e in rep.errors))
    return rep


def _variance_report(cfg: ScenarioConfig, allow_unstable: bool = False, dither_variance: str = "independent"):
    model = cfg.build_model()
    if not isinstance(model, LinearModel):
        raise _Exit(EXIT_VALIDATION, "error: the closed-form variance needs a linear observation model")
    if cfg.alpha.tau != 1.0:
        raise _Exit(EXIT_VALIDATION, f"error: the closed-form variance needs alpha.tau = 1, got {cfg.alpha.tau}")
    Lbar = mean_laplacian(cfg.build_links())
    try:
        return an.asymptotic_variance(cfg.alpha.a, cfg.gain, Lbar, model, np.asarray(cfg.theta),
                                      cfg.build_quantizer(), allow_unstable=allow_unstable,
                                      dither_variance=dither_variance, rng=np.random.default_rng(0))
    except an.StabilityError as exc:
        raise _Exit(EXIT_VALIDATION, f"error: {exc}") from None


def cmd_validate(args) -> int:
    cfg = _load(args.scenario)
    rep = _check(cfg)
    print(json.dumps({"digest": cfg.digest(), "warnings": rep.warnings, **rep.info}, indent=2))
    return EXIT_OK


def _run(cfg: ScenarioConfig):
    problem = cfg.build_problem()
    return run_trials(problem, cfg.algorithm, cfg.run.iterations, cfg.run.seed_list, cfg.run.stride,
                      digest=cfg.digest())


def cmd_run(args) -> int:
    cfg = _override(_load(args.scenario), args)
    _check(cfg)
    traces = _run(cfg)
    manifest = {"scenario": cfg.to_dict(), "digest": cfg.digest(), "algorithm": cfg.algorithm,
                "iterations": cfg.run.iterations, "stride": cfg.run.stride}
    n_div = sum(t.diverged_at is not None for t in traces)
    finals = [t.max_errors[-1] for t in traces if t.diverged_at is None]
    summary = {"trials": len(traces), "diverged": n_div}
    if finals:
        summary["median_final_max_error"] = float(np.median(finals))
    try:
        emit_reports(Path(args.out), traces, manifest, summary=summary)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write outputs: {exc}") from None
    if n_div:
        _err(f"{n_div} of {len(traces)} trials diverged; partial traces written to {args.out}")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        manifest, traces = load_runs(Path(args.runs))
    except (OSError, KeyError, ValueError) as exc:
        raise _Exit(EXIT_IO, f"cannot read runs: {exc}") from None
    kinds = [_REPORT_ALIASES.get(k.strip(), k.strip()) for k in args.report.split(",") if k.strip()]
    theta = np.asarray(manifest["scenario"]["theta"], dtype=float)
    s_nn = None
    if "normality" in kinds:
        cfg = parse_scenario(manifest["scenario"])
        if cfg.algorithm == "lu":
            try:
                s_nn = _variance_report(cfg).s_nn
            except _Exit as exc:
                _err(f"warning: no closed-form reference for normality ({exc})")
    try:
        rep = an.mc_diagnostics(traces, theta, kinds, s_nn=s_nn, min_traces=args.min_traces)
    except ValueError as exc:
        raise _Exit(EXIT_VALIDATION, f"error: {exc}") from None
    out = {"digest": manifest.get("digest"), **rep.to_dict()}
    try:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write report: {exc}") from None
    return EXIT_OK


def cmd_variance(args) -> int:
    cfg = _load(args.scenario)
    _check(cfg, quiet=True)
    rep = _variance_report(cfg, args.allow_unstable, args.dither_variance)
    out = {"digest": cfg.digest(), **rep.to_dict()}
    if cfg.model["kind"] == "linear-builtin:scalar" and not cfg.quantizer["enabled"]:
        N = cfg.graph["n_nodes"]
        try:
            sm = an.scalar_example_summary(N, cfg.model.get("h", 1.0), cfg.model.get("sigma", 1.0), cfg.alpha.a,
                                           cfg.gain, mean_laplacian(cfg.build_links()))
            out.update({"s_lu": sm.s_lu, "s_lu_star": sm.s_lu_star, "s_c": sm.s_c})
        except an.StabilityError:
            pass
    try:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write report: {exc}") from None
    print(json.dumps({k: out[k] for k in ("mean_sensor_variance", "stability_margin", "s_lu", "s_lu_star", "s_c")
                      if k in out}, indent=2))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    d = json.loads(json.dumps(SCALAR_BENCHMARK))
    d["graph"]["n_nodes"] = args.n_nodes
    d["alpha"]["a"] = args.a
    d["gain"] = args.b
    d["run"] = {"iterations": args.iterations, "seeds": [0, args.trials - 1], "stride": max(1, args.iterations // 10)}
    cfg = parse_scenario(d)
    _check(cfg)
    var = _variance_report(cfg)
    Lbar = mean_laplacian(cfg.build_links())
    sm = an.scalar_example_summary(args.n_nodes, 1.0, 1.0, args.a, args.b, Lbar)
    traces = _run(cfg)
    diag = an.mc_diagnostics(traces, np.asarray(cfg.theta), ["consistency", "mse_decay", "normality"],
                             s_nn=var.s_nn, min_traces=min(an.MIN_TRACES, args.trials))
    emp = np.array(diag.sections["normality"].get("empirical_covariance", [[[np.nan]]]))[:, 0, 0]
    summary = {
        "S_LU": sm.s_lu,
        "S_LU_star": sm.s_lu_star,
        "S_c": sm.s_c,
        "S_nn_closed_form": float(var.s_nn[0, 0, 0]),
        "empirical_variance_mean": float(np.mean(emp)),
        "empirical_variance_max_rel_dev": float(np.max(np.abs(emp / var.s_nn[:, 0, 0] - 1))),
        "trials": len(traces),
        "iterations": args.iterations,
    }
    manifest = {"scenario": cfg.to_dict(), "digest": cfg.digest(), "algorithm": "lu",
                "iterations": cfg.run.iterations, "stride": cfg.run.stride}
    try:
        emit_reports(Path(args.out), traces, manifest, analysis={"variance": var.to_dict(), **diag.to_dict()},
                     summary=summary)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write outputs: {exc}") from None
    print("\n".join(f"{k}: {v}" for k, v in summary.items()))
    return EXIT_DIVERGED if diag.n_diverged else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distest", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="parse a scenario and check its assumptions")
    v.add_argument("--scenario", required=True, help="YAML scenario file")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run seeded trials and write CSV traces plus a manifest")
    r.add_argument("--scenario", required=True, help="YAML scenario file")
    r.add_argument("--algorithm", choices=["lu", "nu", "nlu"], help="override the scenario's algorithm")
    r.add_argument("--iterations", type=int, help="override run.iterations")
    r.add_argument("--seeds", help="inclusive seed range 'first..last' (overrides run.seeds)")
    r.add_argument("--stride", type=int, help="recording stride (overrides run.stride)")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="Monte-Carlo diagnostics over a run directory")
    a.add_argument("--runs", required=True, help="directory written by 'run'")
    a.add_argument("--report", default="consistency,mse,consensus,normality",
                   help="comma-separated subset of consistency, mse, consensus, normality")
    a.add_argument("--min-traces", type=int, default=an.MIN_TRACES, help="minimum number of traces")
    a.add_argument("--out", required=True, help="JSON report path")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("variance", help="closed-form asymptotic covariance of LU")
    s.add_argument("--scenario", required=True, help="YAML scenario file (linear model, alpha.tau = 1)")
    s.add_argument("--allow-unstable", action="store_true", help="report even when the stability condition fails")
    s.add_argument("--dither-variance", choices=["independent", "exact"], default="independent",
                   help="per-link quantization variance model")
    s.add_argument("--out", required=True, help="JSON report path")
    s.set_defaults(func=cmd_variance)

    x = sub.add_parser("reproduce-2-4", help="scalar benchmark: closed forms against Monte-Carlo")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--n-nodes", type=int, default=10)
    x.add_argument("--a", type=float, default=1.0)
    x.add_argument("--b", type=float, default=1.0)
    x.add_argument("--trials", type=int, default=1000)
    x.add_argument("--iterations", type=int, default=100_000)
    x.set_defaults(func=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as exc:
        if str(exc):
            _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
