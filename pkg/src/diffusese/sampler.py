"""Predictor-corrector reverse-SDE sampling and data-consistency guidance."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .sde import SdeSchedule, complex_normal, tweedie_denoise


@dataclass(frozen=True)
class SamplerConfig:
    schedule: SdeSchedule
    langevin_r: float = 0.5
    corrector_enabled: bool = True

    def __post_init__(self):
        if not self.langevin_r >= 0:
            raise ValueError(f"langevin_r must be >= 0, got {self.langevin_r}")


@dataclass(frozen=True)
class LambdaSchedule:
    """Guidance weight per step: constant, or proportional to sigma(tau_i)."""

    kind: str = "constant"
    value: float = 1.5

    def __post_init__(self):
        if self.kind not in ("constant", "sigma"):
            raise ValueError(f"unknown lambda schedule {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("lambda must be >= 0")

    def at(self, schedule: SdeSchedule, i: int) -> float:
        if self.kind == "sigma":
            return self.value * schedule.sigma_at(i)
        return self.value


@dataclass
class TrajectoryLog:
    """Per-step diagnostics collected by the samplers and enhancers."""

    rows: list = field(default_factory=list)

    def record(self, **values):
        self.rows.append({k: (float(v) if np.isscalar(v) else v) for k, v in values.items()})

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        for r in self.rows[1:]:
            keys += [k for k in r if k not in keys]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


def check_finite(x, step: int, name: str):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {name} at reverse step {step}")
    return x


def corrector_step(a_i, score_model, cfg: SamplerConfig, i: int, rng: np.random.Generator,
                   label=None, zeta=None):
    """One Langevin step: ``a + eps S(a, tau_i) + sqrt(2 eps) zeta``, eps = (sigma_i r)^2."""
    sched = cfg.schedule
    eps = (sched.sigma_at(i) * cfg.langevin_r) ** 2
    if eps == 0.0:
        return np.array(a_i, dtype=complex, copy=True)
    if zeta is None:
        zeta = complex_normal(rng, np.shape(a_i))
    s = score_model(a_i, sched.tau_at(i), label)
    return a_i + eps * s + math.sqrt(2.0 * eps) * zeta


def predictor_step(h, score_model, cfg: SamplerConfig, i: int, rng: np.random.Generator,
                   label=None, zeta=None):
    """Euler-Maruyama reverse step from tau_i.

    Returns ``(mu_back, a_prev)`` where ``mu_back = h + gamma h dtau + g^2 S(h) dtau``
    and ``a_prev = mu_back + g sqrt(dtau) zeta``.
    """
    sched = cfg.schedule
    g = sched.g_at(i)
    dt = sched.dtau
    s = score_model(h, sched.tau_at(i), label)
    drift = -sched.params.gamma * h
    mu = h - drift * dt + g * g * s * dt
    if zeta is None:
        zeta = complex_normal(rng, np.shape(h))
    return mu, mu + g * math.sqrt(dt) * zeta


def pc_step(a_i, score_model, cfg: SamplerConfig, i: int, rng, label=None):
    """Corrector (if enabled) then predictor; returns the stochastic draw."""
    h = corrector_step(a_i, score_model, cfg, i, rng, label) if cfg.corrector_enabled else a_i
    _, a_prev = predictor_step(h, score_model, cfg, i, rng, label)
    return check_finite(a_prev, i, "predictor output")


def guided_update(state, likelihood_grad, schedule: SdeSchedule, i: int,
                  lam: LambdaSchedule):
    """``state + lambda_i g_i^2 grad dtau``."""
    state = np.asarray(state)
    likelihood_grad = np.asarray(likelihood_grad)
    if state.shape != likelihood_grad.shape:
        raise ValueError(f"shape mismatch {state.shape} vs {likelihood_grad.shape}")
    g = schedule.g_at(i)
    return state + lam.at(schedule, i) * g * g * likelihood_grad * schedule.dtau


def final_denoise(a_1, score_model, schedule: SdeSchedule, label=None):
    """Tweedie estimate of a_0 from the state at tau_1 (integration stops at tau_1)."""
    s = score_model(a_1, schedule.tau_at(1), label)
    return check_finite(tweedie_denoise(a_1, s, schedule, 1), 1, "final Tweedie estimate")


def prior_sample(score_model, shape, cfg: SamplerConfig, rng: np.random.Generator,
                 label=None, init_mean=0.0, init_std: float = 1.0, log: TrajectoryLog = None,
                 burn_in: int = 0):
    """Unconditional sample: a_N ~ N_C(init_mean, init_std^2 I), PC steps N..2, Tweedie at tau_1.

    ``burn_in`` corrector-only Langevin steps at tau_N first move the start
    towards the model's own terminal marginal. With this SDE that marginal keeps
    a fraction delta_N of the data mean, so a data-agnostic start can bias
    which mode a multimodal prior sample lands in.
    """
    if burn_in < 0:
        raise ValueError("burn_in must be >= 0")
    sched = cfg.schedule
    a = init_mean + init_std * complex_normal(rng, shape)
    if burn_in:
        warm = SamplerConfig(sched, langevin_r=cfg.langevin_r, corrector_enabled=True)
        for _ in range(burn_in):
            a = corrector_step(a, score_model, warm, sched.N, rng, label)
        check_finite(a, sched.N, "burn-in state")
    for i in range(sched.N, 1, -1):
        a = pc_step(a, score_model, cfg, i, rng, label)
        if log is not None:
            log.record(step=i, norm=np.linalg.norm(a))
    return final_denoise(a, score_model, sched, label)
