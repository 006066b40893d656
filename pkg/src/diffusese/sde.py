"""Ornstein-Uhlenbeck variance-exploding (OUVE) forward SDE.

The forward process is ``da = -gamma * a dt + g(t) dw`` with a complex Wiener
process ``w`` (unit total variance per bin per unit time). Its perturbation
kernel is ``N_C(delta(t) a0, sigma(t)^2 I)`` with ``delta(t) = exp(-gamma t)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

# Reject tweedie/likelihood evaluations once the drift decay gets this small.
DELTA_FLOOR = 1e-12


@dataclass(frozen=True)
class SdeParams:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    T: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if not self.T > 0:
            raise ValueError(f"T must be > 0, got {self.T}")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def delta(self, t):
        return np.exp(-self.gamma * np.asarray(t, dtype=float))

    def g(self, t):
        """Diffusion coefficient g(t)."""
        t = np.asarray(t, dtype=float)
        k = self.sigma_max / self.sigma_min
        return self.sigma_min * k**t * math.sqrt(2.0 * self.log_ratio)

    def sigma2(self, t):
        """Closed-form kernel variance; solves d(s2)/dt = -2 gamma s2 + g(t)^2, s2(0) = 0."""
        t = np.asarray(t, dtype=float)
        k = self.sigma_max / self.sigma_min
        lr = self.log_ratio
        c = self.sigma_min**2 * lr / (self.gamma + lr)
        return c * (k ** (2.0 * t) - np.exp(-2.0 * self.gamma * t))

    def sigma(self, t):
        return np.sqrt(self.sigma2(t))


@dataclass(frozen=True)
class SdeSchedule:
    """Reverse-time grid tau_i = i T / N, i = 1..N, with per-step coefficients.

    Arrays are indexed ``i - 1`` (so ``tau[-1] == T``); use the accessor
    methods with the 1-based step index used throughout the algorithms.
    """

    params: SdeParams
    N: int
    tau: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    dtau: float = 0.0

    def _check(self, i: int) -> int:
        if not 1 <= i <= self.N:
            raise IndexError(f"step index {i} outside 1..{self.N}")
        return i - 1

    def tau_at(self, i: int) -> float:
        return float(self.tau[self._check(i)])

    def delta_at(self, i: int) -> float:
        return float(self.delta[self._check(i)])

    def sigma_at(self, i: int) -> float:
        return float(self.sigma[self._check(i)])

    def g_at(self, i: int) -> float:
        return float(self.g[self._check(i)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["i", "tau", "delta", "sigma", "g"])
        for i in range(1, self.N + 1):
            k = i - 1
            writer.writerow(
                [i, repr(float(self.tau[k])), repr(float(self.delta[k])),
                 repr(float(self.sigma[k])), repr(float(self.g[k]))]
            )
        return buf.getvalue()


def make_schedule(params: SdeParams, N: int) -> SdeSchedule:
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    tau = np.arange(1, N + 1, dtype=float) * params.T / N
    arrays = dict(
        tau=tau,
        delta=params.delta(tau),
        sigma=params.sigma(tau),
        g=params.g(tau),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return SdeSchedule(params=params, N=N, dtau=params.T / N, **arrays)


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw from N_C(0, I): real and imaginary parts independent with variance 1/2."""
    z = rng.standard_normal((2,) + tuple(np.atleast_1d(shape)))
    return (z[0] + 1j * z[1]) * math.sqrt(0.5)


def perturb(a0, schedule: SdeSchedule, i: int, rng: np.random.Generator) -> np.ndarray:
    """Sample a_i ~ N_C(delta_i a0, sigma_i^2 I)."""
    a0 = np.asarray(a0)
    return schedule.delta_at(i) * a0 + schedule.sigma_at(i) * complex_normal(rng, a0.shape)


def tweedie(a, score, delta: float, sigma2: float):
    """``(a + sigma2 * score) / delta`` for explicit kernel coefficients."""
    if delta < DELTA_FLOOR:
        raise FloatingPointError(f"delta = {delta} below floor {DELTA_FLOOR}")
    return (a + sigma2 * score) / delta


def tweedie_denoise(a_i, score, schedule: SdeSchedule, i: int) -> np.ndarray:
    """Posterior-mean estimate of a0 given a_i from the score at (a_i, tau_i)."""
    a_i = np.asarray(a_i)
    score = np.asarray(score)
    if score.shape != a_i.shape:
        raise ValueError(f"score shape {score.shape} != state shape {a_i.shape}")
    return tweedie(a_i, score, schedule.delta_at(i), schedule.sigma_at(i) ** 2)
