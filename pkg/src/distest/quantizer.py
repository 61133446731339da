"""Uniform lattice quantizer with uniform (Schuchman) dither.

The quantizer maps each component to ``k * step`` with
``(k - 1/2) step <= y < (k + 1/2) step``. Dither is uniform on
``[-step/2, step/2)`` and independent of the input, which makes the error
``eps = q(y + nu) - (y + nu)`` uniform on the same interval and independent of
``y``. It is *not* independent of ``nu`` itself: for a fixed input the error is a
deterministic function of the dither (see ``dither_error_covariance``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

INDEX_GUARD = 2**60


class QuantizerOverflow(OverflowError):
    pass


@dataclass(frozen=True)
class QuantizerSpec:
    """``enabled=False`` means ideal real-valued exchange.

    ``dithered=False`` keeps quantization but drops the dither; it exists only to
    reproduce the failure mode of undithered quantized consensus.
    """

    step: float = 1.0
    enabled: bool = True
    dithered: bool = True

    def __post_init__(self):
        if self.enabled and not (np.isfinite(self.step) and self.step > 0):
            raise ValueError(f"quantizer step must be a positive finite number, got {self.step}")

    @classmethod
    def disabled(cls) -> "QuantizerSpec":
        return cls(step=1.0, enabled=False)


def quantize_indices(y: np.ndarray, step: float) -> np.ndarray:
    """Integer lattice indices ``k`` with ``(k - 1/2) step <= y < (k + 1/2) step``."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot quantize non-finite values")
    kf = np.floor(y / step + 0.5)
    if kf.size and np.max(np.abs(kf)) > INDEX_GUARD:
        raise QuantizerOverflow(f"lattice index exceeds the 2**60 guard (|y| up to {np.max(np.abs(y)):.3e})")
    # division rounding can misplace values sitting on a cell boundary
    kf = kf - ((kf - 0.5) * step > y)
    kf = kf + ((kf + 0.5) * step <= y)
    return kf.astype(np.int64)


def _quantize_values(y: np.ndarray, step: float) -> np.ndarray:
    return quantize_indices(y, step).astype(float) * step


def quantize(y: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    if not spec.enabled:
        raise ValueError("quantizer is disabled")
    return _quantize_values(y, spec.step)


def draw_dither(shape, step: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform dither on ``[-step/2, step/2)``."""
    return (rng.random(shape) - 0.5) * step


class DitheredSample(NamedTuple):
    quantized: np.ndarray
    error: np.ndarray


def dithered_quantize(
    y: np.ndarray,
    spec: QuantizerSpec,
    rng: np.random.Generator | None = None,
    *,
    dither: np.ndarray | None = None,
) -> DitheredSample:
    """Return ``q(y + nu)`` and ``eps = q(y + nu) - (y + nu)``.

    ``dither`` overrides the random draw; it is a unit-test hook.
    """
    if not spec.enabled:
        raise ValueError("quantizer is disabled")
    y = np.asarray(y, dtype=float)
    if dither is None:
        if rng is None:
            raise ValueError("either rng or dither is required")
        dither = draw_dither(y.shape, spec.step, rng)
    v = y + np.asarray(dither, dtype=float)
    qv = _quantize_values(v, spec.step)
    return DitheredSample(qv, qv - v)


@dataclass(frozen=True)
class QuantNoiseAggregate:
    """Per-node sums ``upsilon_n = -sum nu_nl`` and ``psi_n = -sum eps_nl``, stacked."""

    upsilon: np.ndarray
    psi: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.upsilon + self.psi


def aggregate_quant_noise(
    n_nodes: int,
    links: Sequence[tuple[int, int]],
    dithers: np.ndarray,
    errors: np.ndarray,
    laplacian=None,
) -> QuantNoiseAggregate:
    """Aggregate per-link dither and error vectors onto receiving nodes.

    ``links`` holds ordered pairs ``(n, l)``: node ``n`` received from ``l``.
    If a Laplacian is given the link set must be exactly its edge set in both
    directions.
    """
    dithers = np.atleast_2d(np.asarray(dithers, dtype=float))
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    links = [(int(n), int(l)) for n, l in links]
    if laplacian is not None:
        expected = set(laplacian.ordered_links())
        if set(links) != expected or len(links) != len(expected):
            raise ValueError("link set is inconsistent with the sampled Laplacian")
    if len(links) == 0:
        M = dithers.shape[1] if dithers.shape[1] else 1
        zero = np.zeros(n_nodes * M)
        return QuantNoiseAggregate(zero, zero.copy())
    if dithers.shape != errors.shape or dithers.shape[0] != len(links):
        raise ValueError("need one dither and one error vector per link")
    M = dithers.shape[1]
    ups = np.zeros((n_nodes, M))
    psi = np.zeros((n_nodes, M))
    for (n, _), nu, eps in zip(links, dithers, errors):
        ups[n] -= nu
        psi[n] -= eps
    return QuantNoiseAggregate(ups.reshape(-1), psi.reshape(-1))


def eta_q(n_nodes: int, param_dim: int, step: float) -> float:
    """Upper bound ``N (N-1) M step^2 / 3`` on ``E ||upsilon + psi||^2``."""
    return n_nodes * (n_nodes - 1) * param_dim * step**2 / 3.0


def _cell_offset(value, step: float) -> np.ndarray:
    v = np.asarray(value, dtype=float) / step
    return np.abs(v - np.floor(v + 0.5))


def received_error_variance(step: float, value=None) -> np.ndarray | float:
    """Per-component variance of ``q(y + nu) - y``, the error a receiver sees.

    With ``value=None`` the dither and quantization error are treated as
    independent, giving ``step^2/12 + step^2/12``. With a value ``y`` the exact
    input-dependent variance ``step^2 c (1 - c)`` is returned, where ``c`` is the
    distance from ``y/step`` to the nearest lattice point.
    """
    if value is None:
        return step**2 / 6.0
    c = _cell_offset(value, step)
    return step**2 * c * (1.0 - c)


def dither_error_covariance(step: float, value) -> np.ndarray | float:
    """Exact ``E[eps * nu]`` for a fixed input ``y``: ``step^2 (c(1-c)/2 - 1/12)``."""
    c = _cell_offset(value, step)
    return step**2 * (c * (1.0 - c) / 2.0 - 1.0 / 12.0)
