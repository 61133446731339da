"""Decaying gain sequences ``scale / (i + 1)**exponent`` and their admissibility checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WeightSchedule:
    scale: float
    exponent: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"schedule scale must be positive, got {self.scale}")
        if not self.exponent >= 0.0:
            raise ValueError(f"schedule exponent must be nonnegative, got {self.exponent}")

    def __call__(self, i):
        if np.ndim(i) == 0:
            return self.scale / (int(i) + 1) ** self.exponent
        return self.scale / (np.asarray(i, dtype=float) + 1.0) ** self.exponent

    def values(self, start: int, stop: int) -> np.ndarray:
        return self(np.arange(start, stop))


@dataclass
class Verdict:
    ok: bool
    reasons: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def validate_lu_schedule(s: WeightSchedule, mode: str = "persistence", lam_min: float | None = None) -> Verdict:
    """``persistence``: sum diverges, sum of squares converges.

    ``normality`` additionally needs ``a / (i+1)`` with ``a > 1 / (2 lam_min)``,
    ``lam_min`` being the smallest eigenvalue of ``b L-bar (x) I + D_H``.
    """
    reasons = []
    if not 0.5 < s.exponent <= 1.0:
        reasons.append(
            f"persistence condition violated: exponent {s.exponent} must lie in (0.5, 1] "
            "so that the gains sum to infinity while their squares are summable"
        )
    if mode == "normality":
        if lam_min is None or not lam_min > 0:
            raise ValueError("normality mode needs a positive lam_min")
        if s.exponent != 1.0:
            reasons.append(f"asymptotic normality needs exponent 1, got {s.exponent}")
        if not s.scale > 1.0 / (2.0 * lam_min):
            reasons.append(
                f"asymptotic normality needs a > 1/(2 lam_min) = {1.0 / (2.0 * lam_min):.6g}, got a = {s.scale}"
            )
    elif mode != "persistence":
        raise ValueError(f"unknown mode {mode!r}")
    return Verdict(not reasons, reasons)


@dataclass(frozen=True)
class NluSchedulePair:
    """Innovation gains ``alpha`` (exponent tau1) and consensus gains ``beta`` (tau2)."""

    alpha: WeightSchedule
    beta: WeightSchedule
    epsilon1: float

    def __post_init__(self):
        if not self.epsilon1 > 0:
            raise ValueError(f"epsilon1 must be positive, got {self.epsilon1}")


def validate_nlu_schedules(pair: NluSchedulePair) -> Verdict:
    t1, t2 = pair.alpha.exponent, pair.beta.exponent
    reasons = []
    if not 0.5 < t1 <= 1.0:
        reasons.append(f"tau1 = {t1} must lie in (0.5, 1]")
    if not 0.5 < t2 <= 1.0:
        reasons.append(f"tau2 = {t2} must lie in (0.5, 1]")
    margin = 1.0 / (2.0 + pair.epsilon1)
    if not t1 > margin + t2:
        reasons.append(f"tau1 = {t1} must exceed 1/(2+epsilon1) + tau2 = {margin + t2:.6g}")
    if not 2 * t2 > t1:
        reasons.append(f"2 tau2 = {2 * t2} must exceed tau1 = {t1}")
    return Verdict(not reasons, reasons)


def _check_r1(r1: WeightSchedule, lo: int, hi: int) -> None:
    # r1 is decreasing, so its largest value on [lo, hi) is at lo
    if hi > lo and r1(lo) > 1.0:
        raise ValueError(
            f"r1({lo}) = {r1(lo):.6g} > 1: start the tail sum at an index where 1 - r1 stays nonnegative"
        )


def weighted_tail_sums(r1: WeightSchedule, r2: WeightSchedule, j: int, i_max: int) -> np.ndarray:
    """``y[i - j]`` for ``i = j .. i_max`` where

    ``y(i) = sum_{k=j}^{i-1} prod_{l=k+1}^{i-1} (1 - r1(l)) r2(k)``,

    evaluated by the forward recursion ``y(i+1) = (1 - r1(i)) y(i) + r2(i)``.
    """
    if i_max < j:
        raise ValueError("need j <= i")
    _check_r1(r1, j + 1, i_max)
    n = i_max - j
    f = (1.0 - r1.values(j, i_max)).tolist()
    g = r2.values(j, i_max).tolist()
    out = np.empty(n + 1)
    y = 0.0
    out[0] = 0.0
    for t in range(n):
        y = f[t] * y + g[t]
        out[t + 1] = y
    return out


def weighted_tail_sum(r1: WeightSchedule, r2: WeightSchedule, j: int, i: int) -> float:
    return float(weighted_tail_sums(r1, r2, j, i)[-1])


def tail_sum_bound(r1: WeightSchedule, r2: WeightSchedule) -> float:
    """Uniform bound ``2**delta2 a2 (1 + 1/a1)`` for equal exponents."""
    return 2.0**r2.exponent * r2.scale * (1.0 + 1.0 / r1.scale)
