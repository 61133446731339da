"""Scenario files: YAML schema, parsing with located errors, validation, digests.

A scenario describes one experiment::

    name: scalar-benchmark
    graph: {topology: complete, n_nodes: 10}      # or {n_nodes: 4, edges: [[0, 1], ...]}
    links: {kind: fixed}                          # erasure (p), gossip
    model: {kind: "linear-builtin:scalar", h: 1.0, sigma: 1.0}
    theta: [1.0]
    x0: 0.0                                       # scalar, [M] or [N][M]
    quantizer: {enabled: false, step: 0.1, dithered: true}
    algorithm: lu                                 # lu | nu | nlu
    alpha: {a: 1.0, tau: 1.0}
    beta: {a: 0.01, tau: 0.505}                   # nlu only
    gain: 1.0                                     # b for lu, beta for nu
    epsilon1: 0.0408                              # nlu only
    run: {iterations: 100000, seeds: [0, 999], stride: 1000}

Model kinds: ``linear`` (``matrices``, ``noise_cov``, ``matrix_noise_std``),
``linear-builtin:scalar`` (``h``, ``sigma``),
``linear-builtin:partial-observation`` (``param_dim``, ``coords_per_sensor``,
``sigma``) and ``separable-builtin:cubic`` (``param_dim``, ``sigma``).
``run.seeds`` is an inclusive ``[first, last]`` pair or the string ``"a..b"``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import graph as gr
from .estimators import Problem
from .models import (
    LinearModel,
    SeparableModel,
    check_lu_gain_matrix,
    check_observability,
    cubic_model,
    nu_beta_threshold,
    partial_observation_model,
    scalar_model,
)
from .quantizer import QuantizerSpec
from .schedules import NluSchedulePair, WeightSchedule, validate_lu_schedule, validate_nlu_schedules

MODEL_KINDS = ("linear", "linear-builtin:scalar", "linear-builtin:partial-observation", "separable-builtin:cubic")
_TOP_KEYS = {"name", "graph", "links", "model", "theta", "x0", "quantizer", "algorithm", "alpha", "beta", "gain",
             "epsilon1", "run"}


class ScenarioError(ValueError):
    """Parse or validation failure; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class ScheduleConfig:
    a: float
    tau: float = 1.0

    def build(self) -> WeightSchedule:
        return WeightSchedule(self.a, self.tau)


@dataclass(frozen=True)
class RunConfig:
    iterations: int = 1000
    seeds: tuple[int, int] = (0, 0)
    stride: int = 1

    @property
    def seed_list(self) -> list[int]:
        return list(range(self.seeds[0], self.seeds[1] + 1))


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    graph: dict
    links: dict
    model: dict
    theta: tuple[float, ...]
    algorithm: str
    alpha: ScheduleConfig
    run: RunConfig = field(default_factory=RunConfig)
    x0: Any = 0.0
    quantizer: dict = field(default_factory=lambda: {"enabled": False, "step": 1.0, "dithered": True})
    beta: ScheduleConfig | None = None
    gain: float = 1.0
    epsilon1: float | None = None

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = list(self.theta)
        d["run"]["seeds"] = list(self.run.seeds)
        return d

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    # -- construction of runtime objects -----------------------------------
    def build_graph(self) -> gr.LaplacianMatrix:
        n = self.graph["n_nodes"]
        if "edges" in self.graph:
            return gr.laplacian_from_edges(n, self.graph["edges"])
        return gr.named_laplacian(self.graph["topology"], n)

    def build_links(self) -> gr.LinkFailureModel:
        return gr.LinkFailureModel(self.build_graph(), self.links["kind"], float(self.links.get("p", 0.0)))

    def build_model(self) -> LinearModel | SeparableModel:
        m, N = self.model, self.graph["n_nodes"]
        kind = m["kind"]
        if kind == "linear-builtin:scalar":
            return scalar_model(N, m.get("h", 1.0), m.get("sigma", 1.0))
        if kind == "linear-builtin:partial-observation":
            return partial_observation_model(N, m["param_dim"], m.get("coords_per_sensor", 1), m.get("sigma", 1.0))
        if kind == "separable-builtin:cubic":
            return cubic_model(N, m.get("param_dim", 1), m.get("sigma", 1.0))
        return LinearModel(tuple(np.asarray(h, dtype=float) for h in m["matrices"]),
                           np.asarray(m.get("noise_cov", 1.0), dtype=float),
                           matrix_noise_std=float(m.get("matrix_noise_std", 0.0)))

    def build_quantizer(self) -> QuantizerSpec:
        q = self.quantizer
        if not q.get("enabled", False):
            return QuantizerSpec.disabled()
        return QuantizerSpec(float(q["step"]), True, bool(q.get("dithered", True)))

    def build_problem(self) -> Problem:
        model = self.build_model()
        N, M = model.n_sensors, model.param_dim
        x0 = np.asarray(self.x0, dtype=float)
        return Problem(
            links=self.build_links(),
            model=model,
            theta=np.asarray(self.theta, dtype=float),
            alpha=self.alpha.build(),
            gain=self.gain,
            beta=None if self.beta is None else self.beta.build(),
            quantizer=self.build_quantizer(),
            x0=np.broadcast_to(x0, (N, M)).copy(),
            epsilon1=self.epsilon1,
        )


# -- parsing ------------------------------------------------------------------


def _num(errors: list[str], d: dict, key: str, where: str, default=None, required: bool = False,
         positive: bool = False) -> float | None:
    if key not in d:
        if required:
            errors.append(f"{where}.{key}: missing required field")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        errors.append(f"{where}.{key}: expected a finite number, got {v!r}")
        return default
    if positive and not v > 0:
        errors.append(f"{where}.{key}: must be positive, got {v!r}")
        return default
    return float(v)


def _schedule(errors: list[str], d: Any, where: str) -> ScheduleConfig | None:
    if not isinstance(d, dict):
        errors.append(f"{where}: expected a mapping with keys a and tau")
        return None
    unknown = set(d) - {"a", "tau"}
    if unknown:
        errors.append(f"{where}: unknown keys {sorted(unknown)}")
    a = _num(errors, d, "a", where, required=True, positive=True)
    tau = _num(errors, d, "tau", where, default=1.0)
    if tau is not None and tau < 0:
        errors.append(f"{where}.tau: must be nonnegative, got {tau}")
        return None
    return None if a is None else ScheduleConfig(a, tau)


def _seeds(errors: list[str], v: Any) -> tuple[int, int]:
    if isinstance(v, str) and ".." in v:
        lo, _, hi = v.partition("..")
        try:
            v = [int(lo), int(hi)]
        except ValueError:
            errors.append(f"run.seeds: cannot parse {v!r} as 'first..last'")
            return (0, 0)
    if isinstance(v, int) and not isinstance(v, bool):
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(s, int) and not isinstance(s, bool) for s in v):
        if v[1] < v[0] or v[0] < 0:
            errors.append(f"run.seeds: need 0 <= first <= last, got {list(v)}")
            return (0, 0)
        return (int(v[0]), int(v[1]))
    errors.append(f"run.seeds: expected [first, last] or 'first..last', got {v!r}")
    return (0, 0)


def _load_text(source: str | Path | dict) -> dict:
    if isinstance(source, dict):
        return source
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        text = Path(source).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        loc = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        raise ScenarioError([f"YAML syntax error at {loc}: {exc.problem}"]) from None
    except yaml.YAMLError as exc:
        raise ScenarioError([f"YAML error: {exc}"]) from None
    if not isinstance(data, dict):
        raise ScenarioError(["scenario must be a mapping at the top level"])
    return data


def parse_scenario(source: str | Path | dict) -> ScenarioConfig:
    """Parse a scenario from a file path, YAML text or a dict.

    Structural problems raise ``ScenarioError`` listing every offending field;
    assumption checks are left to ``validate_scenario``.
    """
    d = _load_text(source)
    errors: list[str] = []
    unknown = set(d) - _TOP_KEYS
    if unknown:
        errors.append(f"unknown top-level keys {sorted(unknown)}")
    for key in ("graph", "model", "theta", "algorithm", "alpha"):
        if key not in d:
            errors.append(f"{key}: missing required field")

    graph = d.get("graph", {})
    g: dict = {}
    if not isinstance(graph, dict):
        errors.append("graph: expected a mapping")
    else:
        n = graph.get("n_nodes")
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            errors.append(f"graph.n_nodes: expected a positive integer, got {n!r}")
        else:
            g["n_nodes"] = n
        if "edges" in graph:
            edges = graph["edges"]
            if not isinstance(edges, list) or not all(isinstance(e, list) and len(e) == 2 for e in edges):
                errors.append("graph.edges: expected a list of [u, v] pairs")
            else:
                g["edges"] = [[int(u), int(v)] for u, v in edges]
        elif "topology" in graph:
            if graph["topology"] not in ("complete", "ring", "path", "star"):
                errors.append(f"graph.topology: unknown topology {graph['topology']!r}")
            g["topology"] = graph["topology"]
        else:
            errors.append("graph: needs either topology or edges")

    links = d.get("links", {"kind": "fixed"})
    lk: dict = {"kind": "fixed"}
    if not isinstance(links, dict) or links.get("kind", "fixed") not in ("fixed", "erasure", "gossip"):
        errors.append(f"links.kind: expected fixed, erasure or gossip, got {links!r}")
    else:
        lk["kind"] = links.get("kind", "fixed")
        if lk["kind"] == "erasure":
            p = _num(errors, links, "p", "links", required=True)
            if p is not None and not 0 <= p <= 1:
                errors.append(f"links.p: erasure probability must lie in [0, 1], got {p}")
            lk["p"] = p

    model = d.get("model", {})
    md: dict = {}
    if not isinstance(model, dict) or model.get("kind") not in MODEL_KINDS:
        errors.append(f"model.kind: expected one of {list(MODEL_KINDS)}, got {model.get('kind') if isinstance(model, dict) else model!r}")
    else:
        md = dict(model)
        for key in ("h", "sigma", "matrix_noise_std"):
            if key in md:
                _num(errors, md, key, "model")
        for key in ("param_dim", "coords_per_sensor"):
            if key in md and (not isinstance(md[key], int) or md[key] < 1):
                errors.append(f"model.{key}: expected a positive integer, got {md[key]!r}")
        if md["kind"] == "linear-builtin:partial-observation" and "param_dim" not in md:
            errors.append("model.param_dim: missing required field")
        if md["kind"] == "linear" and "matrices" not in md:
            errors.append("model.matrices: missing required field")

    theta = d.get("theta")
    th: tuple[float, ...] = ()
    if isinstance(theta, (int, float)) and not isinstance(theta, bool):
        th = (float(theta),)
    elif isinstance(theta, list) and theta and all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in theta):
        th = tuple(float(t) for t in theta)
    elif "theta" in d:
        errors.append(f"theta: expected a number or a list of numbers, got {theta!r}")

    q = d.get("quantizer", {})
    qd = {"enabled": False, "step": 1.0, "dithered": True}
    if not isinstance(q, dict):
        errors.append("quantizer: expected a mapping")
    else:
        qd["enabled"] = bool(q.get("enabled", False))
        qd["dithered"] = bool(q.get("dithered", True))
        step = _num(errors, q, "step", "quantizer", default=1.0, required=qd["enabled"], positive=True)
        qd["step"] = step if step is not None else 1.0

    algorithm = str(d.get("algorithm", "")).lower()
    if "algorithm" in d and algorithm not in ("lu", "nu", "nlu"):
        errors.append(f"algorithm: expected lu, nu or nlu, got {d['algorithm']!r}")
    alpha = _schedule(errors, d["alpha"], "alpha") if "alpha" in d else None
    beta = _schedule(errors, d["beta"], "beta") if d.get("beta") is not None else None
    gain = _num(errors, d, "gain", "scenario", default=1.0, positive=True)
    eps1 = _num(errors, d, "epsilon1", "scenario", positive=True) if d.get("epsilon1") is not None else None

    r = d.get("run", {})
    run = RunConfig()
    if not isinstance(r, dict):
        errors.append("run: expected a mapping")
    else:
        it, st = r.get("iterations", 1000), r.get("stride", 1)
        if not isinstance(it, int) or isinstance(it, bool) or it < 0:
            errors.append(f"run.iterations: expected a nonnegative integer, got {it!r}")
            it = 0
        if not isinstance(st, int) or isinstance(st, bool) or st < 1:
            errors.append(f"run.stride: expected a positive integer, got {st!r}")
            st = 1
        run = RunConfig(it, _seeds(errors, r.get("seeds", [0, 0])), st)

    x0 = d.get("x0", 0.0)
    try:
        x0 = np.asarray(x0, dtype=float).tolist()
    except (TypeError, ValueError):
        errors.append(f"x0: expected numbers, got {x0!r}")
        x0 = 0.0

    if errors:
        raise ScenarioError(errors)
    return ScenarioConfig(
        name=str(d.get("name", "scenario")), graph=g, links=lk, model=md, theta=th, algorithm=algorithm,
        alpha=alpha, run=run, x0=x0, quantizer=qd, beta=beta, gain=gain, epsilon1=eps1,
    )


def serialize(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


# -- validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_scenario(config: ScenarioConfig) -> ValidationReport:
    """Check the structural assumptions each algorithm relies on.

    Errors: shape mismatches, unobservable linear models, a disconnected mean
    graph, schedules violating the persistence condition, NLU schedules
    violating the time-scale inequalities. Warnings: the NU consensus-weight
    threshold, missing Lipschitz or monotonicity metadata and, for LU with
    ``tau = 1``, the asymptotic-normality condition on ``a``.
    """
    rep = ValidationReport()
    try:
        links = config.build_links()
        model = config.build_model()
    except (ValueError, TypeError) as exc:
        rep.errors.append(f"construction failed: {exc}")
        return rep
    N = links.n_nodes
    if model.n_sensors != N:
        rep.errors.append(f"model has {model.n_sensors} sensors but the graph has {N} nodes")
        return rep
    if len(config.theta) != model.param_dim:
        rep.errors.append(f"theta has length {len(config.theta)}, model parameter dimension is {model.param_dim}")
    x0 = np.asarray(config.x0, dtype=float)
    try:
        np.broadcast_to(x0, (N, model.param_dim))
    except ValueError:
        rep.errors.append(f"x0 of shape {x0.shape} does not broadcast to ({N}, {model.param_dim})")

    Lbar = gr.mean_laplacian(links)
    lam2 = gr.algebraic_connectivity(Lbar)
    rep.info["lambda2_mean_laplacian"] = lam2
    if N > 1 and lam2 == 0.0:
        rep.errors.append("mean connectivity violated: the expected Laplacian has lambda_2 = 0")

    alg = config.algorithm
    linear = isinstance(model, LinearModel)
    if alg == "lu" and not linear:
        rep.errors.append("LU needs a linear observation model")
    if linear:
        obs = check_observability(model)
        rep.info["observability_min_singular_value"] = obs.min_singular_value
        if not obs.full_rank:
            rep.errors.append("observability violated: sum_n H_n^T H_n is rank deficient")

    if alg in ("lu", "nu"):
        v = validate_lu_schedule(config.alpha.build())
        rep.errors.extend(v.reasons)
    if alg == "lu" and linear and not rep.errors:
        gm = check_lu_gain_matrix(config.gain, Lbar, model)
        rep.info["gain_matrix_lam_min"] = gm.lam_min
        rep.info["gain_matrix_lam_max"] = gm.lam_max
        if config.alpha.tau == 1.0 and gm.lam_min > 0:
            nv = validate_lu_schedule(config.alpha.build(), "normality", gm.lam_min)
            rep.warnings.extend(f"{r} (consistency is unaffected)" for r in nv.reasons)
    if alg == "nu":
        sep = model.as_separable() if linear else model
        if sep.lipschitz is None or sep.gamma is None:
            rep.warnings.append(
                f"model {sep.name!r} declares no Lipschitz/monotonicity constants; "
                "the sufficient conditions for NU consistency cannot be checked"
            )
        elif lam2 > 0:
            thr = nu_beta_threshold(sep.lipschitz, sep.gamma, lam2)
            rep.info["nu_beta_threshold"] = thr
            if not config.gain > thr:
                rep.warnings.append(
                    f"consensus weight beta = {config.gain} is below the sufficient threshold {thr:.6g}; "
                    "consistency is not guaranteed but the run is permitted"
                )
    if alg == "nlu":
        if config.beta is None:
            rep.errors.append("NLU needs a beta schedule")
        if config.epsilon1 is None:
            rep.errors.append("NLU needs epsilon1")
        if config.beta is not None and config.epsilon1 is not None:
            v = validate_nlu_schedules(NluSchedulePair(config.alpha.build(), config.beta.build(), config.epsilon1))
            rep.errors.extend(f"time-scale condition violated: {r}" for r in v.reasons)
    return rep


# -- packaged scenarios --------------------------------------------------------------

SCALAR_BENCHMARK = {
    "name": "scalar-benchmark",
    "graph": {"topology": "complete", "n_nodes": 10},
    "links": {"kind": "fixed"},
    "model": {"kind": "linear-builtin:scalar", "h": 1.0, "sigma": 1.0},
    "theta": [1.0],
    "algorithm": "lu",
    "alpha": {"a": 1.0, "tau": 1.0},
    "gain": 1.0,
    "run": {"iterations": 100_000, "seeds": [0, 999], "stride": 10_000},
}

LOSSY_QUANTIZED = {
    "name": "ring-erasure-quantized",
    "graph": {"topology": "ring", "n_nodes": 10},
    "links": {"kind": "erasure", "p": 0.2},
    "model": {"kind": "linear-builtin:partial-observation", "param_dim": 5, "coords_per_sensor": 1, "sigma": 1.0},
    "theta": [1.234, -0.717, 2.052, 0.461, -1.583],
    "quantizer": {"enabled": True, "step": 0.1, "dithered": True},
    "algorithm": "lu",
    "alpha": {"a": 1.0, "tau": 0.75},
    "gain": 1.0,
    "run": {"iterations": 100_000, "seeds": [0, 99], "stride": 10_000},
}

CUBIC_NLU = {
    "name": "cubic-nlu",
    "graph": {"topology": "complete", "n_nodes": 20},
    "links": {"kind": "fixed"},
    "model": {"kind": "separable-builtin:cubic", "param_dim": 1, "sigma": 1.0},
    "theta": [2.0],
    "algorithm": "nlu",
    "alpha": {"a": 1.0, "tau": 1.0},
    "beta": {"a": 0.01, "tau": 0.505},
    "epsilon1": 1.0 / 0.49 - 2.0,
    "run": {"iterations": 100_000, "seeds": [0, 99], "stride": 100},
}

BUILTIN_SCENARIOS = {s["name"]: s for s in (SCALAR_BENCHMARK, LOSSY_QUANTIZED, CUBIC_NLU)}
