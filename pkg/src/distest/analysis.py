"""Asymptotic covariance of LU, the scalar benchmark, Lyapunov functions,
the noise-free expectation recursion and Monte-Carlo summaries of traces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .estimators import EstimatorState, Trace, lu_step
from .graph import LaplacianMatrix
from .models import LinearModel, check_lu_gain_matrix, lu_gain_matrix
from .quantizer import QuantizerSpec, received_error_variance
from .schedules import WeightSchedule

MIN_TRACES = 30
REPORT_KINDS = ("consistency", "mse_decay", "consensus", "normality")


class StabilityError(ValueError):
    pass


# -- asymptotic covariance ----------------------------------------------------


@dataclass
class AsymptoticVarianceReport:
    sigma_matrix: np.ndarray
    s0: np.ndarray
    s: np.ndarray
    s_nn: np.ndarray  # (N, M, M)
    stability_margin: float
    lyapunov_residual: float
    s_h: np.ndarray
    s_obs: np.ndarray
    s_q: np.ndarray
    s_h_stderr: np.ndarray | None = None

    @property
    def stable(self) -> bool:
        return self.stability_margin < 0

    @property
    def mean_sensor_variance(self) -> float:
        """``Tr(S) / N``."""
        return float(np.trace(self.s)) / self.s_nn.shape[0]

    def to_dict(self) -> dict:
        return {
            "stability_margin": self.stability_margin,
            "lyapunov_residual": self.lyapunov_residual,
            "mean_sensor_variance": self.mean_sensor_variance,
            "s_nn": self.s_nn.tolist(),
            "s": self.s.tolist(),
            "s0": self.s0.tolist(),
            "s_h_stderr": None if self.s_h_stderr is None else self.s_h_stderr.tolist(),
        }


def lyapunov_solve(sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``Sigma S + S Sigma = -rhs`` for symmetric ``Sigma``.

    In the eigenbasis of ``Sigma`` the equation decouples entrywise, which is
    exact for the symmetric drift matrices arising here.
    """
    lam, V = np.linalg.eigh(sigma)
    r = V.T @ rhs @ V
    denom = lam[:, None] + lam[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        st = -r / denom
    S = V @ st @ V.T
    return 0.5 * (S + S.T)


def matrix_noise_covariance(model: LinearModel, theta: np.ndarray, rng: np.random.Generator | None = None,
                            n_draws: int = 20_000) -> tuple[np.ndarray, np.ndarray | None]:
    """``S_H`` and, when sampled, the elementwise standard error of the estimate."""
    N, M = model.n_sensors, model.param_dim
    theta = np.asarray(theta, dtype=float)
    Dbar = model.stacked_mean_matrix().T  # (NM, D)
    if model.matrix_noise_sampler is None:
        if model.matrix_noise_std == 0:
            return np.zeros((N * M, N * M)), None
        # rows of the perturbed observation are independent with variance s^2 ||theta||^2
        return model.matrix_noise_std**2 * float(theta @ theta) * model.block_gram(), None
    if rng is None:
        raise ValueError("a custom matrix-noise sampler needs an rng for the Monte-Carlo estimate of S_H")
    Ht = np.asarray(model.matrix_noise_sampler(rng, n_draws), dtype=float)
    v = (Ht @ theta) @ Dbar.T  # (draws, NM)
    outer = v[:, :, None] * v[:, None, :]
    est = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / math.sqrt(n_draws)
    return 0.5 * (est + est.T), se


def quantization_covariance(mean_laplacian: LaplacianMatrix, param_dim: int, quant: QuantizerSpec | None,
                            theta: np.ndarray | None = None, dither_variance: str = "independent") -> np.ndarray:
    """Covariance of the quantization aggregate at the consensus state.

    Each ordered link carries its own dither, so nodes are uncorrelated and
    node ``n`` accumulates ``E[deg_n] = L-bar_nn`` independent link errors.
    ``dither_variance="independent"`` uses ``step^2/6`` per link component;
    ``"exact"`` uses the input-dependent variance evaluated at ``theta``.
    """
    N = mean_laplacian.n_nodes
    if quant is None or not quant.enabled:
        return np.zeros((N * param_dim, N * param_dim))
    if not quant.dithered:
        raise ValueError("undithered quantization has no stationary covariance model")
    if dither_variance == "independent":
        v = np.full(param_dim, received_error_variance(quant.step))
    elif dither_variance == "exact":
        if theta is None:
            raise ValueError("exact dither variance needs theta")
        v = np.broadcast_to(received_error_variance(quant.step, np.asarray(theta, dtype=float)), (param_dim,))
    else:
        raise ValueError(f"unknown dither_variance {dither_variance!r}")
    deg = np.diag(np.asarray(mean_laplacian))
    return np.diag(np.kron(deg, v))


def asymptotic_variance(a: float, b: float, mean_laplacian: LaplacianMatrix, model: LinearModel,
                        theta: np.ndarray, quant: QuantizerSpec | None = None, allow_unstable: bool = False,
                        dither_variance: str = "independent", rng: np.random.Generator | None = None,
                        mc_draws: int = 20_000) -> AsymptoticVarianceReport:
    """Limiting covariance of ``sqrt(i) (x(i) - 1 (x) theta)`` for LU with ``alpha(i) = a/(i+1)``."""
    N, M = model.n_sensors, model.param_dim
    gain = lu_gain_matrix(b, mean_laplacian, model)
    sigma = -a * gain + 0.5 * np.eye(N * M)
    margin = float(np.linalg.eigvalsh(sigma)[-1])
    if margin >= 0 and not allow_unstable:
        lam_min = float(np.linalg.eigvalsh(gain)[0])
        bound = math.inf if lam_min <= 0 else 1.0 / (2.0 * lam_min)
        raise StabilityError(
            f"normality stability condition fails: need a > 1/(2 lam_min) = {bound:.6g}, got a = {a} "
            f"(max eigenvalue of the drift is {margin:.3e})"
        )
    s_h, s_h_se = matrix_noise_covariance(model, theta, rng, mc_draws)
    Dbar = model.stacked_mean_matrix().T
    s_obs = Dbar @ model.noise_cov @ Dbar.T
    s_q = quantization_covariance(mean_laplacian, M, quant, theta, dither_variance)
    s0 = s_h + s_obs + b**2 * s_q
    S = lyapunov_solve(sigma, a**2 * s0)
    resid = sigma @ S + S @ sigma.T + a**2 * s0
    s_nn = np.stack([S[n * M : (n + 1) * M, n * M : (n + 1) * M] for n in range(N)])
    return AsymptoticVarianceReport(
        sigma_matrix=sigma, s0=s0, s=S, s_nn=s_nn, stability_margin=margin,
        lyapunov_residual=float(np.max(np.abs(resid))) if np.all(np.isfinite(resid)) else math.inf,
        s_h=s_h, s_obs=s_obs, s_q=s_q, s_h_stderr=s_h_se,
    )


# -- scalar benchmark -------------------------------------------------------


@dataclass(frozen=True)
class ScalarExampleSummary:
    s_lu: float
    s_lu_star: float
    s_c: float


def scalar_example_summary(N: int, h: float, sigma: float, a: float, b: float,
                           mean_laplacian: LaplacianMatrix) -> ScalarExampleSummary:
    """Closed-form average per-sensor variance for identical scalar sensors.

    ``s_lu_star`` is its infimum over admissible ``(a, b)`` and ``s_c`` the
    variance of the centralized sample mean; the two coincide.
    """
    if h == 0 or not sigma > 0:
        raise ValueError("need h != 0 and sigma > 0")
    if mean_laplacian.n_nodes != N:
        raise ValueError(f"mean Laplacian has {mean_laplacian.n_nodes} nodes, expected {N}")
    if not a > 1.0 / (2.0 * h * h):
        raise StabilityError(f"need a > 1/(2 h^2) = {1.0 / (2.0 * h * h):.6g}, got a = {a}")
    lam = mean_laplacian.eigenvalues
    terms = 1.0 / (2.0 * a * b * lam + (2.0 * a * h * h - 1.0))
    s_lu = a * a * sigma * sigma * h * h / N * float(np.sum(terms))
    s_c = sigma * sigma / (N * h * h)
    s_star = sigma * sigma / (N * h * h)
    assert s_star == s_c
    return ScalarExampleSummary(s_lu, s_star, s_c)


# -- Lyapunov functions -----------------------------------------------------------


def evaluate_lyapunov(kind: str, x: np.ndarray, theta: np.ndarray, gain: float,
                      mean_laplacian: LaplacianMatrix | None = None, model: LinearModel | None = None) -> float:
    """LU: quadratic form of the gain matrix in the error; NU: squared error norm."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    e = np.asarray(x, dtype=float).reshape(-1) - np.tile(theta, len(np.asarray(x).reshape(-1)) // len(theta))
    kind = kind.lower()
    if kind == "nu":
        return float(e @ e)
    if kind == "lu":
        if mean_laplacian is None or model is None:
            raise ValueError("LU Lyapunov function needs the mean Laplacian and the model")
        return float(e @ lu_gain_matrix(gain, mean_laplacian, model) @ e)
    raise ValueError(f"unknown kind {kind!r}")


# -- expectation recursion ----------------------------------------------------


@dataclass
class EnvelopeCheck:
    iterations: np.ndarray
    errors: np.ndarray
    envelope: np.ndarray  # nan before i0
    lyapunov: np.ndarray
    i0: int
    lam_min: float
    lam_max: float

    @property
    def holds(self) -> bool:
        m = self.iterations >= self.i0
        return bool(np.all(self.errors[m] <= self.envelope[m] * (1 + 1e-12) + 1e-12))

    @property
    def lyapunov_decreasing(self) -> bool:
        m = self.iterations >= self.i0
        v = self.lyapunov[m]
        return bool(np.all(np.diff(v) <= 1e-12 * np.maximum(1.0, v[:-1])))


def expectation_envelope(alpha: WeightSchedule, b: float, mean_laplacian: LaplacianMatrix, model: LinearModel,
                         theta: np.ndarray, x0: np.ndarray, iterations: int) -> EnvelopeCheck:
    """Iterate LU with every random input replaced by its mean and compare the
    error to ``exp(-lam_min sum_{j=i0}^{i-1} alpha(j)) ||e(i0)||``, where ``i0``
    is the first index with ``alpha(i0) <= 1 / lam_max``."""
    rep = check_lu_gain_matrix(b, mean_laplacian, model)
    N, M = model.n_sensors, model.param_dim
    theta = np.asarray(theta, dtype=float)
    z_mean = np.concatenate([h @ theta for h in model.mean_matrices])
    target = np.tile(theta, N)
    i0 = 0
    while alpha(i0) > 1.0 / rep.lam_max:
        i0 += 1
    x0 = np.asarray(x0, dtype=float)
    x0 = x0.reshape(N, M) if x0.size == N * M else np.broadcast_to(x0, (N, M))
    state = EstimatorState(0, x0.reshape(-1).copy())
    errs, lyap = [], []
    for i in range(iterations + 1):
        errs.append(float(np.linalg.norm(state.estimates - target)))
        lyap.append(evaluate_lyapunov("lu", state.estimates, theta, b, mean_laplacian, model))
        if i < iterations:
            state = lu_step(state, mean_laplacian, z_mean, model, alpha(i), b)
    errs = np.array(errs)
    env = np.full(iterations + 1, np.nan)
    if i0 <= iterations:
        cum = np.concatenate([[0.0], np.cumsum(alpha.values(i0, iterations))])
        env[i0:] = np.exp(-rep.lam_min * cum) * errs[i0]
    return EnvelopeCheck(np.arange(iterations + 1), errs, env, np.array(lyap), i0, rep.lam_min, rep.lam_max)


# -- Monte-Carlo diagnostics ---------------------------------------------------


@dataclass
class DiagnosticsReport:
    n_traces: int
    n_diverged: int
    sections: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n_traces": self.n_traces, "n_diverged": self.n_diverged, **self.sections}


def _quantiles(x: np.ndarray) -> dict:
    return {"median": float(np.median(x)), "p90": float(np.quantile(x, 0.9)), "max": float(np.max(x))}


def mc_diagnostics(traces: Sequence[Trace], theta: np.ndarray, reports: Iterable[str] = REPORT_KINDS,
                   s_nn: np.ndarray | None = None, min_traces: int = MIN_TRACES) -> DiagnosticsReport:
    """Summaries across independent trials of one scenario.

    ``normality`` compares the covariance of ``sqrt(i) (x_n(i) - theta)`` at
    the final iterate with ``s_nn`` (shape ``(N, M, M)``) and reports the
    standardized skewness and excess kurtosis per coordinate.
    """
    reports = list(reports)
    for r in reports:
        if r not in REPORT_KINDS:
            raise ValueError(f"unknown report {r!r}; expected one of {REPORT_KINDS}")
    if len(traces) < min_traces:
        raise ValueError(f"distributional reports need at least {min_traces} traces, got {len(traces)}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ok = [t for t in traces if t.diverged_at is None]
    out = DiagnosticsReport(len(traces), len(traces) - len(ok))
    if not ok:
        out.sections["degenerate"] = "every trace diverged"
        return out

    if "consistency" in reports:
        init = np.array([t.max_errors[0] for t in ok])
        final = np.array([t.max_errors[-1] for t in ok])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(init > 0, final / init, np.where(final > 0, np.inf, 0.0))
        out.sections["consistency"] = {"final_error": _quantiles(final), "ratio_to_initial": _quantiles(ratio)}

    if "mse_decay" in reports:
        its = ok[0].iterations
        common = all(np.array_equal(t.iterations, its) for t in ok)
        sec: dict = {}
        if not common:
            sec["degenerate"] = "traces recorded different iterations"
        else:
            mse = np.mean([np.mean(t.sensor_errors**2, axis=1) for t in ok], axis=0)
            last = its[-1]
            m = (its >= last / 10) & (its > 0) & (mse > 0)
            if m.sum() < 2:
                sec["degenerate"] = "fewer than two positive mean-squared errors in the final decade"
            else:
                slope = float(np.polyfit(np.log(its[m]), np.log(mse[m]), 1)[0])
                sec = {"slope": slope, "window": [int(its[m][0]), int(its[m][-1])], "final_mse": float(mse[-1])}
        out.sections["mse_decay"] = sec

    if "consensus" in reports:
        gaps = np.array([t.consensus_gap[-1] for t in ok])
        out.sections["consensus"] = {"final_gap": _quantiles(gaps)}

    if "normality" in reports:
        i_final = ok[0].final_iteration
        sec = {"iteration": i_final}
        if i_final == 0:
            sec["degenerate"] = "no iterations recorded"
        else:
            dev = math.sqrt(i_final) * (np.stack([t.final_estimates for t in ok]) - theta)  # (T, N, M)
            cov = np.einsum("tnm,tnk->nmk", dev - dev.mean(axis=0), dev - dev.mean(axis=0)) / (len(ok) - 1)
            sec["empirical_covariance"] = cov.tolist()
            if np.all(cov == 0):
                sec["degenerate"] = "zero empirical covariance"
            else:
                flat = dev.reshape(len(ok), -1)
                sd = flat.std(axis=0)
                good = sd > 0
                sec["skewness"] = np.where(good, stats.skew(flat, axis=0), np.nan).tolist()
                sec["excess_kurtosis"] = np.where(good, stats.kurtosis(flat, axis=0), np.nan).tolist()
            if s_nn is not None:
                ref = np.asarray(s_nn, dtype=float)
                rel = np.linalg.norm(cov - ref, axis=(1, 2)) / np.linalg.norm(ref, axis=(1, 2))
                sec["relative_frobenius"] = rel.tolist()
                sec["max_relative_frobenius"] = float(np.max(rel))
        out.sections["normality"] = sec
    return out
