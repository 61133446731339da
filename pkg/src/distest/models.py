"""Observation models: linear sensing and separably estimable nonlinear sensing.

Both model types expose the same stacked interface the recursions need:

* ``sample(theta, rng, size)`` draws ``size`` i.i.d. network observations,
* ``transform(z)`` maps raw observations to ``J(z)``, shape ``(..., N, M)``,
* ``sensor_means(x)`` evaluates ``M(x) = [h_1(x_1), ..., h_N(x_N)]``.

For a linear model ``transform`` is ``z_n -> H_n^T z_n`` and ``sensor_means``
is ``x_n -> H_n^T H_n x_n``, so embedding it as a separable model reuses the very
same functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .graph import LaplacianMatrix, algebraic_connectivity

FULL_RANK_RTOL = 1e-10


class ModelError(ValueError):
    pass


def _as_matrix(h) -> np.ndarray:
    a = np.array(h, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ModelError(f"observation matrix must be 2-D, got shape {a.shape}")
    return a


def _psd_factor(cov: np.ndarray, method: str) -> np.ndarray:
    """``F`` with ``F F^T = cov``."""
    if method == "cholesky":
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            # singular but PSD covariances need the eigen route
            pass
    elif method != "eigh":
        raise ModelError(f"unknown factorization {method!r}")
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``z_n(i) = (H_n + H~_n(i)) theta + zeta_n(i)`` for every sensor ``n``.

    ``noise_cov`` is the joint covariance of the stacked noise (length
    ``sum M_n``) and may couple sensors. Matrix noise is either i.i.d. Gaussian
    with ``matrix_noise_std`` per entry, or drawn by ``matrix_noise_sampler(rng,
    size)`` returning ``(size, sum M_n, M)`` stacked rows of ``H~``.
    """

    mean_matrices: tuple[np.ndarray, ...]
    noise_cov: np.ndarray
    matrix_noise_std: float = 0.0
    matrix_noise_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
    factorization: str = "cholesky"
    _pad: np.ndarray = field(init=False, repr=False)
    _gram: np.ndarray = field(init=False, repr=False)
    _factor: np.ndarray = field(init=False, repr=False)
    _diag_std: np.ndarray | None = field(init=False, repr=False)
    _rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mats = tuple(_as_matrix(h) for h in self.mean_matrices)
        if not mats:
            raise ModelError("need at least one sensor")
        M = mats[0].shape[1]
        for n, h in enumerate(mats):
            if h.shape[1] != M:
                raise ModelError(f"sensor {n}: H has {h.shape[1]} columns, expected {M}")
        object.__setattr__(self, "mean_matrices", mats)
        D = sum(h.shape[0] for h in mats)
        cov = np.array(self.noise_cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(D)
        if cov.shape != (D, D):
            raise ModelError(f"noise covariance must be {D}x{D}, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ModelError("noise covariance is not symmetric")
        if D and np.linalg.eigvalsh(cov)[0] < -1e-10 * max(1.0, np.abs(cov).max()):
            raise ModelError("noise covariance is not positive semidefinite")
        object.__setattr__(self, "noise_cov", cov)
        if self.matrix_noise_std < 0:
            raise ModelError("matrix_noise_std must be nonnegative")

        N, Mmax = len(mats), max(h.shape[0] for h in mats)
        pad = np.zeros((N, Mmax, M))
        rows = np.zeros((N, Mmax), dtype=bool)
        for n, h in enumerate(mats):
            pad[n, : h.shape[0]] = h
            rows[n, : h.shape[0]] = True
        object.__setattr__(self, "_pad", pad)
        object.__setattr__(self, "_rows", rows)
        object.__setattr__(self, "_gram", np.einsum("nkm,nkj->nmj", pad, pad))
        if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
            object.__setattr__(self, "_diag_std", np.sqrt(np.diag(cov)))
            object.__setattr__(self, "_factor", np.diag(np.sqrt(np.diag(cov))))
        else:
            object.__setattr__(self, "_diag_std", None)
            object.__setattr__(self, "_factor", _psd_factor(cov, self.factorization))

    # -- shapes ------------------------------------------------------------
    @property
    def n_sensors(self) -> int:
        return len(self.mean_matrices)

    @property
    def param_dim(self) -> int:
        return self.mean_matrices[0].shape[1]

    @property
    def sensor_dims(self) -> list[int]:
        return [h.shape[0] for h in self.mean_matrices]

    @property
    def obs_dim(self) -> int:
        return sum(self.sensor_dims)

    @property
    def padded_matrices(self) -> np.ndarray:
        """``(N, max M_n, M)`` stack of mean matrices, zero rows as padding."""
        return self._pad

    @property
    def gram_blocks(self) -> np.ndarray:
        """``(N, M, M)`` stack of ``H_n^T H_n``, the diagonal blocks of ``D_H``."""
        return self._gram

    def stacked_mean_matrix(self) -> np.ndarray:
        """Dense ``diag(H_1, ..., H_N)`` of shape ``(sum M_n, N M)``; its transpose is ``D-bar_H``."""
        out = np.zeros((self.obs_dim, self.n_sensors * self.param_dim))
        r = 0
        for n, h in enumerate(self.mean_matrices):
            out[r : r + h.shape[0], n * self.param_dim : (n + 1) * self.param_dim] = h
            r += h.shape[0]
        return out

    def block_gram(self) -> np.ndarray:
        """Dense ``D_H = diag(H_1^T H_1, ..., H_N^T H_N)``."""
        N, M = self.n_sensors, self.param_dim
        out = np.zeros((N * M, N * M))
        for n in range(N):
            out[n * M : (n + 1) * M, n * M : (n + 1) * M] = self._gram[n]
        return out

    # -- padded <-> stacked observations ------------------------------------
    def pad_observation(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + self._rows.shape)
        out[..., self._rows] = z
        return out

    def unpad_observation(self, zp: np.ndarray) -> np.ndarray:
        return zp[..., self._rows]

    # -- stacked maps -------------------------------------------------------
    def transform(self, zp: np.ndarray) -> np.ndarray:
        """``H_n^T z_n`` for padded observations ``(..., N, max M_n)``."""
        return np.einsum("nkm,...nk->...nm", self._pad, zp)

    def sensor_means(self, x: np.ndarray) -> np.ndarray:
        """``H_n^T H_n x_n`` for ``x`` of shape ``(..., N, M)``."""
        return np.einsum("nmj,...nj->...nm", self._gram, x)

    def sample(self, theta: np.ndarray, rng: np.random.Generator, size: int,
               matrix_rng: np.random.Generator | None = None) -> np.ndarray:
        """``size`` padded observations ``(size, N, max M_n)``.

        Observation noise is drawn from ``rng``; matrix noise (if any) from
        ``matrix_rng`` so each noise source can own a separate stream.
        """
        theta = np.asarray(theta, dtype=float)
        D = self.obs_dim
        g = rng.standard_normal((size, D))
        if self._diag_std is not None:
            zeta = g * self._diag_std
        else:
            zeta = g @ self._factor.T
        z = np.concatenate([h @ theta for h in self.mean_matrices]) + zeta
        if self.matrix_noise_std > 0 or self.matrix_noise_sampler is not None:
            mrng = rng if matrix_rng is None else matrix_rng
            if self.matrix_noise_sampler is not None:
                Ht = np.asarray(self.matrix_noise_sampler(mrng, size), dtype=float)
            else:
                Ht = self.matrix_noise_std * mrng.standard_normal((size, D, self.param_dim))
            z = z + Ht @ theta
        return self.pad_observation(z)

    def as_separable(self) -> "SeparableModel":
        """Embed as a separable model with ``g_n(z) = H_n^T z`` (so ``h(theta) = G theta / N``)."""
        G = observability_gram(self)
        Ginv = np.linalg.inv(G) if check_observability(self).full_rank else None
        N = self.n_sensors

        def h(theta):
            return np.asarray(theta, dtype=float) @ G.T / N

        def h_inv(y):
            if Ginv is None:
                raise ModelError("G is singular; the linear embedding is not invertible")
            return N * (np.asarray(y, dtype=float) @ Ginv.T)

        K = max(float(np.linalg.norm(g, 2)) for g in self._gram)
        gamma = float(np.linalg.eigvalsh(G)[0]) / N
        return SeparableModel(
            n_sensors=N,
            param_dim=self.param_dim,
            sample=self.sample,
            transform=self.transform,
            sensor_means=self.sensor_means,
            h=h,
            h_inv=h_inv,
            lipschitz=K,
            gamma=gamma if gamma > 0 else None,
            name="linear-embedding",
        )


@dataclass(frozen=True, eq=False)
class SeparableModel:
    """Separably estimable model given through stacked callables.

    ``sample(theta, rng, size, matrix_rng=None)`` returns raw observations with
    leading axis ``size``; ``h`` and ``h_inv`` act on the last axis (length
    ``M``); ``lipschitz`` is the
    largest per-sensor constant ``K`` and ``gamma`` the strong-monotonicity
    constant of ``h``, both optional metadata.
    """

    n_sensors: int
    param_dim: int
    sample: Callable[..., np.ndarray]
    transform: Callable[[np.ndarray], np.ndarray]
    sensor_means: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    h_inv: Callable[[np.ndarray], np.ndarray]
    lipschitz: float | None = None
    gamma: float | None = None
    name: str = "custom"


def observe_linear(model: LinearModel, theta: np.ndarray, rng: np.random.Generator,
                   matrix_rng: np.random.Generator | None = None) -> np.ndarray:
    """One stacked observation ``z(i)`` of length ``sum M_n``."""
    return model.unpad_observation(model.sample(theta, rng, 1, matrix_rng=matrix_rng)[0])


def observe_separable(model: SeparableModel | LinearModel, theta: np.ndarray, rng: np.random.Generator,
                      matrix_rng: np.random.Generator | None = None) -> np.ndarray:
    """One stacked transformed observation ``J(z(i))`` of length ``N M``."""
    return np.asarray(model.transform(model.sample(theta, rng, 1, matrix_rng=matrix_rng))[0]).reshape(-1)


# -- built-in models ---------------------------------------------------------


def scalar_model(n_sensors: int, h: float = 1.0, sigma: float = 1.0) -> LinearModel:
    """Every sensor sees ``h theta + zeta`` with i.i.d. ``N(0, sigma^2)`` noise."""
    if h == 0:
        raise ModelError("h must be nonzero")
    return LinearModel(tuple(np.array([[float(h)]]) for _ in range(n_sensors)), sigma**2 * np.eye(n_sensors))


def partial_observation_model(n_sensors: int, param_dim: int, coords_per_sensor: int = 1,
                              sigma: float = 1.0) -> LinearModel:
    """Sensor ``n`` observes coordinates ``n, n+1, ...`` (mod ``M``) and nothing else."""
    mats = []
    for n in range(n_sensors):
        H = np.zeros((coords_per_sensor, param_dim))
        for r in range(coords_per_sensor):
            H[r, (n + r) % param_dim] = 1.0
        mats.append(H)
    D = n_sensors * coords_per_sensor
    return LinearModel(tuple(mats), sigma**2 * np.eye(D))


def cubic_model(n_sensors: int, param_dim: int = 1, sigma: float = 1.0) -> SeparableModel:
    """``z_n = theta^3 + zeta_n`` componentwise, ``g_n`` the identity.

    ``h`` is strictly increasing with a continuous inverse, but is neither
    globally Lipschitz nor strongly monotone.
    """

    def sample(theta, rng, size, matrix_rng=None):
        theta = np.asarray(theta, dtype=float)
        return theta**3 + sigma * rng.standard_normal((size, n_sensors, param_dim))

    return SeparableModel(
        n_sensors=n_sensors,
        param_dim=param_dim,
        sample=sample,
        transform=lambda z: z,
        sensor_means=lambda x: x**3,
        h=lambda th: np.asarray(th, dtype=float) ** 3,
        h_inv=np.cbrt,
        name="cubic",
    )


# -- checks -------------------------------------------------------------------


class ObservabilityReport(NamedTuple):
    G: np.ndarray
    full_rank: bool
    min_singular_value: float


def observability_gram(model: LinearModel) -> np.ndarray:
    return sum(h.T @ h for h in model.mean_matrices)


def check_observability(model: LinearModel) -> ObservabilityReport:
    """``G = sum H_n^T H_n`` and whether it is invertible."""
    G = observability_gram(model)
    s = np.linalg.svd(G, compute_uv=False)
    return ObservabilityReport(G, bool(s[-1] > FULL_RANK_RTOL * s[0]) if s[0] > 0 else False, float(s[-1]))


class GainMatrixReport(NamedTuple):
    positive_definite: bool
    lam_min: float
    lam_max: float


def lu_gain_matrix(b: float, mean_laplacian: LaplacianMatrix, model: LinearModel) -> np.ndarray:
    """Dense ``b (L-bar (x) I_M) + D_H``."""
    M = model.param_dim
    return b * np.kron(np.asarray(mean_laplacian), np.eye(M)) + model.block_gram()


def check_lu_gain_matrix(b: float, mean_laplacian: LaplacianMatrix, model: LinearModel) -> GainMatrixReport:
    A = lu_gain_matrix(b, mean_laplacian, model)
    w = np.linalg.eigvalsh(A)
    lam_min, lam_max = float(w[0]), float(w[-1])
    pd = lam_min > FULL_RANK_RTOL * max(lam_max, 1e-300)
    connected = mean_laplacian.n_nodes == 1 or algebraic_connectivity(mean_laplacian) > 0
    if connected and check_observability(model).full_rank and not pd:
        raise ArithmeticError(
            f"gain matrix should be positive definite for a mean-connected, observable network "
            f"(lam_min={lam_min:.3e})"
        )
    return GainMatrixReport(bool(pd), lam_min, lam_max)


def nu_beta_threshold(K: float, gamma: float, lam2: float) -> float:
    """Consensus weight above which strongly monotone NU is guaranteed consistent."""
    for name, v in (("K", K), ("gamma", gamma), ("lambda_2", lam2)):
        if not v > 0:
            raise ValueError(f"{name} must be strictly positive, got {v}")
    return (K**2 + K * gamma) / (gamma * lam2)


class SeparabilityReport(NamedTuple):
    roundtrip_error: float
    consistency_error: float
    ok: bool


def check_separable(model: SeparableModel, points: np.ndarray) -> SeparabilityReport:
    """Round trip ``h_inv(h(theta))`` and ``h == mean_n h_n`` on test points ``(P, M)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    hp = model.h(pts)
    rt = float(np.max(np.abs(model.h_inv(hp) - pts) / np.maximum(1.0, np.abs(pts))))
    stacked = np.repeat(pts[:, None, :], model.n_sensors, axis=1)
    avg = model.sensor_means(stacked).mean(axis=1)
    cons = float(np.max(np.abs(avg - hp) / np.maximum(1.0, np.abs(hp))))
    return SeparabilityReport(rt, cons, rt <= 1e-8 and cons <= 1e-10)


def _random_pairs(rng, n_pairs, param_dim, scale):
    a = scale * rng.standard_normal((n_pairs, param_dim))
    b = scale * rng.standard_normal((n_pairs, param_dim))
    return a, b


def check_lipschitz(model: SeparableModel, rng: np.random.Generator, n_pairs: int = 10_000,
                    scale: float = 1.0, constants: Sequence[float] | float | None = None) -> bool:
    """Sampled check of ``||h_n(a) - h_n(b)|| <= k_n ||a - b||`` for every sensor."""
    k = model.lipschitz if constants is None else constants
    if k is None:
        raise ValueError("no Lipschitz constants declared")
    k = np.broadcast_to(np.asarray(k, dtype=float), (model.n_sensors,))
    a, b = _random_pairs(rng, n_pairs, model.param_dim, scale)
    N = model.n_sensors
    ha = model.sensor_means(np.repeat(a[:, None], N, axis=1))
    hb = model.sensor_means(np.repeat(b[:, None], N, axis=1))
    lhs = np.linalg.norm(ha - hb, axis=-1)
    rhs = k * np.linalg.norm(a - b, axis=-1)[:, None]
    return bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-14))


def check_monotone(model: SeparableModel, rng: np.random.Generator, n_pairs: int = 10_000,
                   scale: float = 1.0, gamma: float | None = None, per_sensor: bool = False) -> bool:
    """Sampled check of ``(a-b)^T (h(a)-h(b)) >= gamma ||a-b||^2``.

    With ``per_sensor=True`` the weak form ``>= 0`` is checked for every ``h_n``.
    """
    a, b = _random_pairs(rng, n_pairs, model.param_dim, scale)
    d = a - b
    if per_sensor:
        N = model.n_sensors
        diff = model.sensor_means(np.repeat(a[:, None], N, axis=1)) - model.sensor_means(np.repeat(b[:, None], N, axis=1))
        return bool(np.all(np.einsum("pm,pnm->pn", d, diff) >= -1e-12))
    g = model.gamma if gamma is None else gamma
    if g is None:
        raise ValueError("no monotonicity constant declared")
    lhs = np.einsum("pm,pm->p", d, model.h(a) - model.h(b))
    return bool(np.all(lhs >= g * np.einsum("pm,pm->p", d, d) * (1 - 1e-12) - 1e-14))


class MomentEstimates(NamedTuple):
    eta: float
    kappa: float
    kappa1: float
    kappa2: float


def empirical_moments(model: SeparableModel, theta: np.ndarray, rng: np.random.Generator,
                      n_draws: int = 10_000, epsilon1: float = 0.0) -> MomentEstimates:
    """Monte-Carlo estimates of the observation-spread moments.

    ``eta``: mean squared deviation of the network-average transformed
    observation from ``h(theta)``; ``kappa*``: moments of order ``2+eps1``, 1 and 2
    of the disagreement of ``J(z)`` from its network average.
    """
    J = model.transform(model.sample(np.asarray(theta, dtype=float), rng, n_draws))
    avg = J.mean(axis=1)
    eta = float(np.mean(np.sum((avg - model.h(theta)) ** 2, axis=-1)))
    dev = np.sqrt(np.sum((J - avg[:, None, :]) ** 2, axis=(1, 2)))
    return MomentEstimates(eta, float(np.mean(dev ** (2 + epsilon1))), float(np.mean(dev)), float(np.mean(dev**2)))


def numerical_inverse(h: Callable[[np.ndarray], np.ndarray], y: np.ndarray, x0: np.ndarray | None = None,
                      tol: float = 1e-12, max_iter: int = 200, fd_step: float = 1e-7) -> np.ndarray:
    """Damped Newton solve of ``h(x) = y`` with a finite-difference Jacobian.

    A fallback utility only; nothing in the package calls it implicitly.
    """
    y = np.asarray(y, dtype=float)
    x = np.zeros_like(y) if x0 is None else np.array(x0, dtype=float)
    M = y.shape[-1]
    for _ in range(max_iter):
        r = h(x) - y
        nr = np.linalg.norm(r)
        if nr <= tol * max(1.0, np.linalg.norm(y)):
            return x
        Jm = np.empty((M, M))
        for m in range(M):
            e = np.zeros(M)
            e[m] = fd_step * max(1.0, abs(x[m]))
            Jm[:, m] = (h(x + e) - h(x - e)) / (2 * e[m])
        dx = np.linalg.lstsq(Jm, r, rcond=None)[0]
        t = 1.0
        while t > 1e-6 and np.linalg.norm(h(x - t * dx) - y) >= nr:
            t *= 0.5
        x = x - t * dx
    raise ArithmeticError("numerical inverse did not converge")
