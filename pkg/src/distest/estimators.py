"""Consensus+innovations update kernels (LU, NU, NLU) and the trial runner.

Per-iteration draw order is fixed: link activity, then observations, then one
dither vector per ordered link ``(n, l)`` in lexicographic order. Every noise
source owns a generator derived from ``(trial seed, source label[, link])``,
and each generator is consumed in blocks of ``CHUNK`` iterations using draws
whose streams do not depend on block boundaries. A trial therefore produces
the same numbers whether it runs alone or batched with other trials.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import quantizer as qz
from .graph import LaplacianMatrix, LinkFailureModel
from .models import LinearModel, SeparableModel
from .quantizer import QuantizerSpec
from .schedules import WeightSchedule

ALGORITHMS = ("lu", "nu", "nlu")
CHUNK = 256
DIVERGENCE_LIMIT = 1e12
_BATCH_BUDGET = 20_000_000  # floats held per chunk across a batch

_LABELS = {"graph": 1, "observation": 2, "matrix": 3, "dither": 4}


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int, trace: "Trace | None" = None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


def substream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for one noise source of one trial."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _LABELS[label], *map(int, extra)]))


@dataclass(frozen=True)
class EstimatorState:
    """Stacked estimates ``x(i)`` (length ``N*M``); NLU also carries ``x~(i)``."""

    iteration: int
    estimates: np.ndarray
    transformed: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything a trial needs besides its seed.

    ``gain`` is ``b`` for LU and ``beta`` for NU; NLU uses the ``beta`` schedule.
    ``x0`` is ``(N, M)`` in the parameter domain (zeros when omitted).
    """

    links: LinkFailureModel
    model: LinearModel | SeparableModel
    theta: np.ndarray
    alpha: WeightSchedule
    gain: float = 1.0
    beta: WeightSchedule | None = None
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec.disabled)
    x0: np.ndarray | None = None
    epsilon1: float | None = None

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", theta)
        if self.model.n_sensors != self.links.n_nodes:
            raise ValueError(
                f"model has {self.model.n_sensors} sensors but the graph has {self.links.n_nodes} nodes"
            )
        if theta.shape != (self.model.param_dim,):
            raise ValueError(f"theta must have length {self.model.param_dim}")
        N, M = self.n_nodes, self.param_dim
        x0 = np.zeros((N, M)) if self.x0 is None else np.broadcast_to(np.asarray(self.x0, dtype=float), (N, M)).copy()
        object.__setattr__(self, "x0", x0)

    @property
    def n_nodes(self) -> int:
        return self.links.n_nodes

    @property
    def param_dim(self) -> int:
        return self.model.param_dim

    def separable_model(self) -> SeparableModel:
        return self.model.as_separable() if isinstance(self.model, LinearModel) else self.model


@dataclass
class Trace:
    """Recorded rows of one trial.

    ``sensor_errors[r, n] = ||x_n(i_r) - theta||``; ``consensus_gap`` is the norm
    of the disagreement component (of ``x~`` for NLU); ``transformed_error`` is
    ``max_n ||x~_n - h(theta)||`` (NLU only). ``alpha`` and ``consensus_weight``
    are the gains applied at step ``i_r``: ``alpha b``, ``alpha beta`` and
    ``beta(i)`` for LU, NU and NLU.
    """

    seed: int
    digest: str
    algorithm: str
    iterations: np.ndarray
    sensor_errors: np.ndarray
    consensus_gap: np.ndarray
    alpha: np.ndarray
    consensus_weight: np.ndarray
    final_estimates: np.ndarray
    transformed_error: np.ndarray | None = None
    final_transformed: np.ndarray | None = None
    estimates: np.ndarray | None = None
    diverged_at: int | None = None
    divergence_reason: str | None = None

    @property
    def n_nodes(self) -> int:
        return self.sensor_errors.shape[1]

    @property
    def final_iteration(self) -> int:
        return int(self.iterations[-1])

    @property
    def max_errors(self) -> np.ndarray:
        return self.sensor_errors.max(axis=1)


# -- shared arithmetic -------------------------------------------------------


def _quantized(send: np.ndarray, quant: QuantizerSpec, dither: np.ndarray | None) -> np.ndarray:
    if not quant.dithered:
        return qz._quantize_values(send, quant.step)
    return qz._quantize_values(send + dither, quant.step)


def _ci_update(X, alpha, weight, exchange, innovation):
    return X - alpha * (weight * exchange + innovation)


def _nlu_update(Xt, alpha, beta, exchange, J):
    return Xt - beta * exchange - alpha * (Xt - J)


def _dense_exchange(X: np.ndarray, L: LaplacianMatrix, quant: QuantizerSpec | None,
                    rng: np.random.Generator | None, dither: np.ndarray | None) -> np.ndarray:
    """``sum_{l in N_n} (x_n - received_nl)`` for a single ``(N, M)`` state."""
    if quant is None or not quant.enabled:
        return np.asarray(L) @ X
    if not L.is_unweighted():
        raise ValueError("quantized exchange needs an unweighted Laplacian sample")
    links = L.ordered_links()
    out = np.zeros_like(X)
    if not links:
        return out
    dst = np.array([n for n, _ in links])
    src = np.array([l for _, l in links])
    K, M = len(links), X.shape[1]
    if quant.dithered and dither is None:
        if rng is None:
            raise ValueError("dithered exchange needs an rng or an explicit dither")
        dither = qz.draw_dither((K, M), quant.step, rng)
    recv = _quantized(X[src], quant, None if dither is None else np.asarray(dither, dtype=float).reshape(K, M))
    np.add.at(out, dst, X[dst] - recv)
    return out


def _check_finite(X: np.ndarray, iteration: int) -> None:
    if not np.max(np.abs(X)) <= DIVERGENCE_LIMIT:
        raise DivergenceError(f"estimates diverged at iteration {iteration}", iteration)


def lu_step(state: EstimatorState, laplacian: LaplacianMatrix, z: np.ndarray, model: LinearModel,
            alpha: float, b: float, quant: QuantizerSpec | None = None,
            rng: np.random.Generator | None = None, *, dither: np.ndarray | None = None) -> EstimatorState:
    """One LU update; ``z`` is the stacked observation of length ``sum M_n``.

    ``dither`` (shape ``(links, M)``, links ordered lexicographically) replaces
    the random draw and is meant for tests.
    """
    N, M = model.n_sensors, model.param_dim
    X = np.asarray(state.estimates, dtype=float).reshape(N, M)
    J = model.transform(model.pad_observation(z))
    ex = _dense_exchange(X, laplacian, quant, rng, dither)
    Xn = _ci_update(X, alpha, b, ex, model.sensor_means(X) - J)
    _check_finite(Xn, state.iteration + 1)
    return EstimatorState(state.iteration + 1, Xn.reshape(-1))


def nu_step(state: EstimatorState, laplacian: LaplacianMatrix, J: np.ndarray, model: SeparableModel,
            alpha: float, beta: float, quant: QuantizerSpec | None = None,
            rng: np.random.Generator | None = None, *, dither: np.ndarray | None = None) -> EstimatorState:
    """One NU update; ``J`` is the stacked transformed observation (length ``N*M``)."""
    N, M = model.n_sensors, model.param_dim
    X = np.asarray(state.estimates, dtype=float).reshape(N, M)
    ex = _dense_exchange(X, laplacian, quant, rng, dither)
    Xn = _ci_update(X, alpha, beta, ex, model.sensor_means(X) - np.asarray(J, dtype=float).reshape(N, M))
    _check_finite(Xn, state.iteration + 1)
    return EstimatorState(state.iteration + 1, Xn.reshape(-1))


def nlu_step(state: EstimatorState, laplacian: LaplacianMatrix, J: np.ndarray, model: SeparableModel,
             alpha: float, beta: float, quant: QuantizerSpec | None = None,
             rng: np.random.Generator | None = None, *, dither: np.ndarray | None = None) -> EstimatorState:
    """One NLU update in the transformed domain, followed by ``x_n = h_inv(x~_n)``.

    Neighbours exchange ``h(x_l) = x~_l``; the identity holds exactly whenever
    ``h_inv`` is an exact inverse, so the transformed state is sent directly.
    """
    N, M = model.n_sensors, model.param_dim
    if state.transformed is None:
        Xt = model.h(np.asarray(state.estimates, dtype=float).reshape(N, M))
    else:
        Xt = np.asarray(state.transformed, dtype=float).reshape(N, M)
    ex = _dense_exchange(Xt, laplacian, quant, rng, dither)
    Xtn = _nlu_update(Xt, alpha, beta, ex, np.asarray(J, dtype=float).reshape(N, M))
    _check_finite(Xtn, state.iteration + 1)
    with np.errstate(all="ignore"):
        Xn = model.h_inv(Xtn)
    if not np.all(np.isfinite(Xn)):
        raise DivergenceError(f"h_inv left its domain at iteration {state.iteration + 1}", state.iteration + 1)
    return EstimatorState(state.iteration + 1, Xn.reshape(-1), Xtn.reshape(-1))


# -- batched runner ----------------------------------------------------------


class _LinkLayout:
    """Ordered links of the base graph and the receiver incidence matrix."""

    def __init__(self, links: LinkFailureModel):
        pairs = []
        for e, (u, v) in enumerate(links.edges):
            pairs.append((u, v, e))
            pairs.append((v, u, e))
        pairs.sort()
        self.dst = np.array([p[0] for p in pairs], dtype=np.int64)
        self.src = np.array([p[1] for p in pairs], dtype=np.int64)
        self.edge = np.array([p[2] for p in pairs], dtype=np.int64)
        self.pairs = [(p[0], p[1]) for p in pairs]
        self.incidence = np.zeros((links.n_nodes, len(pairs)))
        self.incidence[self.dst, np.arange(len(pairs))] = 1.0


def _weights(problem: Problem, algorithm: str, i: int) -> tuple[float, float]:
    """(innovation gain, effective consensus weight) at step ``i``.

    The consensus weight is the full coefficient of the Laplacian term:
    ``alpha(i) b`` for LU, ``alpha(i) beta`` for NU and ``beta(i)`` for NLU.
    """
    a = problem.alpha(i)
    if algorithm == "nlu":
        return a, problem.beta(i)
    return a, a * problem.gain


def run_trials(problem: Problem, algorithm: str, iterations: int, seeds: Sequence[int], stride: int = 1,
               digest: str = "", keep_estimates: bool = False, check_average: bool = False,
               batch_size: int | None = None) -> list[Trace]:
    """Run one trial per seed; diverged trials come back with ``diverged_at`` set."""
    algorithm = algorithm.lower()
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if iterations < 0 or int(iterations) != iterations:
        raise ValueError("iterations must be a nonnegative integer")
    if stride < 1:
        raise ValueError("stride must be positive")
    if algorithm == "lu" and not isinstance(problem.model, LinearModel):
        raise ValueError("LU needs a linear observation model")
    if algorithm == "nlu" and problem.beta is None:
        raise ValueError("NLU needs a beta schedule")
    seeds = [int(s) for s in seeds]
    layout = _LinkLayout(problem.links)
    N, M = problem.n_nodes, problem.param_dim
    c = max(1, min(CHUNK, int(iterations)))
    per_trial = c * (N * M + len(problem.links.edges) + len(layout.pairs) * M + 1)
    bs = batch_size or max(1, _BATCH_BUDGET // per_trial)
    traces: list[Trace] = []
    for start in range(0, len(seeds), bs):
        traces.extend(_run_batch(problem, algorithm, int(iterations), seeds[start : start + bs], stride,
                                 digest, keep_estimates, check_average, layout))
    return traces


def run_trial(problem: Problem, algorithm: str, iterations: int, seed: int, stride: int = 1,
              digest: str = "", keep_estimates: bool = False) -> Trace:
    """Single seeded trial; raises ``DivergenceError`` carrying the partial trace."""
    (trace,) = run_trials(problem, algorithm, iterations, [seed], stride, digest, keep_estimates)
    if trace.diverged_at is not None:
        raise DivergenceError(trace.divergence_reason or "diverged", trace.diverged_at, trace)
    return trace


def _record_rows(iterations: int, stride: int) -> np.ndarray:
    rows = list(range(0, iterations + 1, stride))
    if rows[-1] != iterations:
        rows.append(iterations)
    return np.array(rows, dtype=np.int64)


def _run_batch(problem: Problem, algorithm: str, iterations: int, seeds: list[int], stride: int, digest: str,
               keep_estimates: bool, check_average: bool, layout: _LinkLayout) -> list[Trace]:
    S, N, M = len(seeds), problem.n_nodes, problem.param_dim
    nlu = algorithm == "nlu"
    model = problem.model if algorithm == "lu" else problem.separable_model()
    theta = problem.theta
    quant = problem.quantizer
    links = problem.links
    K = len(layout.pairs)
    fast_fixed = links.kind == "fixed" and not quant.enabled
    L_base = np.asarray(links.base)
    with_dither = quant.enabled and quant.dithered

    g_rng = [substream(s, "graph") for s in seeds]
    o_rng = [substream(s, "observation") for s in seeds]
    m_rng = [substream(s, "matrix") for s in seeds]
    d_rng = [[substream(s, "dither", n, l) for (n, l) in layout.pairs] for s in seeds] if with_dither else None

    h_theta = model.h(theta) if nlu else None
    X = np.repeat(problem.x0[None], S, axis=0)
    if nlu:
        X = model.h(X)  # transformed state

    rows = _record_rows(iterations, stride)
    R = len(rows)
    err = np.full((S, R, N), np.nan)
    gap = np.full((S, R), np.nan)
    terr = np.full((S, R), np.nan) if nlu else None
    est = np.full((S, R, N, M), np.nan) if keep_estimates else None
    w_alpha = np.empty(R)
    w_cons = np.empty(R)
    diverged = np.full(S, -1, dtype=np.int64)
    reason = [None] * S
    alive = np.ones(S, dtype=bool)
    Xp = model.h_inv(X) if nlu else X

    def record(r: int, i: int, Xcur: np.ndarray, Xpar: np.ndarray):
        a, w = _weights(problem, algorithm, i)
        w_alpha[r], w_cons[r] = a, w
        e = np.linalg.norm(Xpar - theta, axis=2)
        g = np.linalg.norm((Xcur - Xcur.mean(axis=1, keepdims=True)).reshape(S, -1), axis=1)
        err[alive, r] = e[alive]
        gap[alive, r] = g[alive]
        if nlu:
            terr[alive, r] = np.linalg.norm(Xcur - h_theta, axis=2).max(axis=1)[alive]
        if est is not None:
            est[alive, r] = Xpar[alive]

    record(0, 0, X, Xp)
    next_row = 1
    for c0 in range(0, iterations, CHUNK):
        c = min(CHUNK, iterations - c0)
        masks = [links.sample_active(g_rng[s], c) for s in range(S)]
        mask = None if masks[0] is None else np.stack(masks).astype(float)  # (S, c, E)
        J = np.stack([model.transform(model.sample(theta, o_rng[s], c, matrix_rng=m_rng[s])) for s in range(S)])
        if with_dither:
            nu = np.empty((S, c, K, M))
            for s in range(S):
                for k in range(K):
                    nu[s, :, k, :] = qz.draw_dither((c, M), quant.step, d_rng[s][k])
        for t in range(c):
            i = c0 + t
            a, w = _weights(problem, algorithm, i)
            if not nlu:
                w = problem.gain  # the CI update scales the Laplacian term by alpha itself
            if fast_fixed:
                ex = L_base @ X
            else:
                send = X[:, layout.src, :]
                recv = _quantized(send, quant, nu[:, t] if with_dither else None) if quant.enabled else send
                diff = X[:, layout.dst, :] - recv
                if mask is not None:
                    diff = diff * mask[:, t, layout.edge][:, :, None]
                ex = layout.incidence @ diff
            Jt = J[:, t]
            with np.errstate(all="ignore"):
                if nlu:
                    Xn = _nlu_update(X, a, w, ex, Jt)
                    Xpn = model.h_inv(Xn)
                else:
                    Xn = _ci_update(X, a, w, ex, model.sensor_means(X) - Jt)
                    Xpn = Xn
            if check_average and nlu:
                _assert_average_dynamics(X, Xn, a, w, Jt, send if not fast_fixed else X, recv if not fast_fixed else X,
                                         None if fast_fixed else (mask[:, t, layout.edge] if mask is not None else None),
                                         layout, N)
            big = ~(np.abs(Xn).max(axis=(1, 2)) <= DIVERGENCE_LIMIT)
            if nlu:
                big |= ~np.isfinite(Xpn).all(axis=(1, 2))
            newly = big & alive
            if newly.any():
                for s in np.nonzero(newly)[0]:
                    diverged[s] = i + 1
                    finite = np.abs(Xn[s]).max() <= DIVERGENCE_LIMIT
                    reason[s] = (f"h_inv left its domain at iteration {i + 1}" if finite
                                 else f"estimates diverged at iteration {i + 1}")
                alive &= ~newly
            if big.any():
                Xn = Xn.copy()
                Xn[big] = 0.0
                Xpn = Xpn.copy() if nlu else Xn
                Xpn[big] = 0.0
            X, Xp = Xn, Xpn
            if next_row < R and rows[next_row] == i + 1:
                record(next_row, i + 1, X, Xp)
                next_row += 1

    out = []
    for s, seed in enumerate(seeds):
        keep = np.isfinite(gap[s])
        d = None if diverged[s] < 0 else int(diverged[s])
        out.append(Trace(
            seed=seed,
            digest=digest,
            algorithm=algorithm,
            iterations=rows[keep],
            sensor_errors=err[s, keep],
            consensus_gap=gap[s, keep],
            alpha=w_alpha[keep],
            consensus_weight=w_cons[keep],
            final_estimates=Xp[s].copy(),
            transformed_error=terr[s, keep] if nlu else None,
            final_transformed=X[s].copy() if nlu else None,
            estimates=est[s, keep] if est is not None else None,
            diverged_at=d,
            divergence_reason=reason[s],
        ))
    return out


def _assert_average_dynamics(X, Xn, alpha, beta, J, send, recv, mask, layout, N):
    """Network average of the NLU step: the Laplacian term cancels exactly."""
    if mask is None:
        noise = -(recv - send)
    else:
        noise = -(recv - send) * mask[:, :, None]
    # sum over links of -(received - sent) is sum_n (upsilon_n + psi_n)
    qavg = noise.sum(axis=1) / N
    expected = X.mean(axis=1) - alpha * (X.mean(axis=1) - J.mean(axis=1)) - beta * qavg
    got = Xn.mean(axis=1)
    scale = max(1.0, float(np.abs(X).max()))
    if not np.allclose(got, expected, rtol=0, atol=1e-12 * scale):
        raise AssertionError(f"average dynamics violated: max deviation {np.abs(got - expected).max():.3e}")
