"""Unsupervised diffusion-based speech enhancement algorithms.

All algorithms work on complex STFT grids ``x`` of shape ``(F, L)`` and share
the reverse-time loop of :mod:`diffusese.sampler`: states are integrated from
tau_N down to tau_1 and the returned estimate is the Tweedie denoise at tau_1.

* ``udiffse``         EM; each E-step is a full guided reverse pass from noise.
* ``udiffse+``        one guided pass with an NMF update after every step.
* ``diffuseen``       like ``udiffse+`` but the noise is a latent variable with
                      a closed-form Gaussian posterior (Gibbs-style exchange).
* ``paradiffuse-in``  diffusion noise prior, noise integrated out via a
                      single-sample likelihood score.
* ``paradiffuse-en``  diffusion priors for speech and noise, both sampled with
                      cross guidance, then a Wiener post-filter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nmf
from .sampler import (
    LambdaSchedule,
    SamplerConfig,
    TrajectoryLog,
    check_finite,
    corrector_step,
    final_denoise,
    guided_update,
    pc_step,
    predictor_step,
)
from .score import NOISE, SPEECH, ScoreModel
from .sde import SdeParams, SdeSchedule, complex_normal, make_schedule, tweedie_denoise
from .spectral import wiener_postfilter

ALGORITHMS = ("udiffse", "udiffse+", "diffuseen", "paradiffuse-in", "paradiffuse-en")

_DEFAULT_LAMBDA = {
    "udiffse": LambdaSchedule("constant", 1.5),
    "udiffse+": LambdaSchedule("constant", 1.5),
    "diffuseen": LambdaSchedule("constant", 1.75),
    "paradiffuse-in": LambdaSchedule("constant", 1.0),
    "paradiffuse-en": LambdaSchedule("sigma", 5.75),
}


@dataclass
class EnhanceConfig:
    algorithm: str = "diffuseen"
    N: int = 30
    lam: LambdaSchedule | None = None
    sigma_r: float = 5e-4
    nmf_rank: int = 4
    nmf_iters: int = 1
    nmf_exponent: float = 0.5
    m_step: bool = True
    em_iters: int = 5
    posterior_samples: int = 1
    langevin_r: float = 0.5
    corrector: bool | None = None
    sde: SdeParams = field(default_factory=SdeParams)
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.lam is None:
            self.lam = _DEFAULT_LAMBDA[self.algorithm]
        if self.corrector is None:
            self.corrector = self.algorithm != "paradiffuse-en"
        errors = []
        if self.N < 2:
            errors.append("N must be >= 2")
        if not self.sigma_r > 0:
            errors.append("sigma_r must be > 0")
        if self.nmf_rank < 1:
            errors.append("nmf_rank must be >= 1")
        if self.nmf_iters < 0:
            errors.append("nmf_iters must be >= 0")
        if self.em_iters < 1:
            errors.append("em_iters must be >= 1")
        if self.posterior_samples < 1:
            errors.append("posterior_samples must be >= 1")
        if self.langevin_r < 0:
            errors.append("langevin_r must be >= 0")
        if errors:
            raise ValueError("invalid EnhanceConfig: " + "; ".join(errors))

    @property
    def sigma_r2(self) -> float:
        return self.sigma_r**2

    def schedule(self) -> SdeSchedule:
        return make_schedule(self.sde, self.N)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.schedule(), langevin_r=self.langevin_r,
                             corrector_enabled=self.corrector)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["lam"] = asdict(self.lam)
        return d


@dataclass
class NoisePosterior:
    mu_n: np.ndarray
    Sigma_n: np.ndarray


@dataclass
class EnhanceResult:
    speech: np.ndarray
    noise: np.ndarray | None = None
    speech_prefilter: np.ndarray | None = None
    noise_prefilter: np.ndarray | None = None
    nmf: nmf.NmfParams | None = None
    log: TrajectoryLog = field(default_factory=TrajectoryLog)


# ---------------------------------------------------------------------------
# Closed-form pieces
# ---------------------------------------------------------------------------


def noise_posterior(x, s_hat, v_phi, sigma_r2: float) -> NoisePosterior:
    """Gaussian posterior of n given x = s + n + r, n ~ N_C(0, v), r ~ N_C(0, sigma_r2)."""
    x, s_hat = np.asarray(x), np.asarray(s_hat)
    v = np.asarray(v_phi, dtype=float)
    if x.shape != s_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {s_hat.shape}")
    if np.any(v <= 0):
        raise ValueError("noise variance field must be > 0")
    mu = v / (sigma_r2 + v) * (x - s_hat)
    Sigma = sigma_r2 * v / (sigma_r2 + v)
    return NoisePosterior(mu_n=mu, Sigma_n=np.broadcast_to(Sigma, x.shape).copy())


def pseudo_likelihood_grad_implicit(x, s_i, v_phi, schedule: SdeSchedule, i: int):
    """Score of N_C(x; s_i / delta_i, sigma_i^2 / delta_i^2 + diag(v)) w.r.t. s_i."""
    d = schedule.delta_at(i)
    J = schedule.sigma_at(i) ** 2 / d**2 + np.asarray(v_phi, dtype=float)
    return (x - s_i / d) / (d * J)


def pseudo_likelihood_grad_explicit(x, a_i, other, sigma_r2: float, schedule: SdeSchedule,
                                    i: int):
    """Score of N_C(x; a_i / delta_i + other, (sigma_i^2 / delta_i^2 + sigma_r2) I) w.r.t. a_i.

    ``a_i`` is the diffused source being sampled (speech or noise) and
    ``other`` the current point estimate of the complementary source.
    """
    d = schedule.delta_at(i)
    c = 1.0 / (d * (schedule.sigma_at(i) ** 2 / d**2 + sigma_r2))
    return c * (x - (a_i / d + other))


def noise_score_guidance(x, s_back, noise_score, schedule: SdeSchedule, i: int,
                         rng: np.random.Generator, zeta=None):
    """Single-sample likelihood score through the noise prior.

    Forms ``n_i = x - (s_back - sigma_i zeta) / delta_i`` and returns
    ``-S_noise(n_i, tau_i) / delta_i`` together with ``n_i``. The sign inside
    the bracket follows the published pseudo-code; the equivalent derivation
    adds ``(sigma_i / delta_i) z`` to the speech estimate instead, which is the
    same distribution for symmetric ``z``.
    """
    d = schedule.delta_at(i)
    if zeta is None:
        zeta = complex_normal(rng, np.shape(x))
    n_i = x - (s_back - schedule.sigma_at(i) * zeta) / d
    return -noise_score(n_i, schedule.tau_at(i), NOISE) / d, n_i


def m_step_nmf(power_field, params: nmf.NmfParams, iters: int = 1,
               exponent: float = 0.5) -> nmf.NmfParams:
    """IS-NMF multiplicative updates on a posterior power statistic."""
    for _ in range(iters):
        params = nmf.mu_update(power_field, params, exponent)
    return params


def implicit_noise_estimate(x, s_hat, v_phi):
    """Wiener-style noise estimate for the implicit models: v / (v + |s|^2) x."""
    v = np.asarray(v_phi, dtype=float)
    return v / (v + np.abs(s_hat) ** 2) * x


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------


def _init_nmf(x, cfg: EnhanceConfig, rng, noise_var):
    if noise_var is not None:
        return None, np.broadcast_to(np.asarray(noise_var, dtype=float), x.shape)
    params = nmf.init_params(np.abs(x) ** 2, cfg.nmf_rank, rng)
    return params, params.variance


def _warm_start(x, schedule: SdeSchedule, rng, std=None):
    std = schedule.sigma_at(schedule.N) if std is None else std
    return x + std * complex_normal(rng, x.shape)


def udiffse(x, speech_score: ScoreModel, cfg: EnhanceConfig, rng: np.random.Generator,
            noise_var=None) -> EnhanceResult:
    """EM with full guided reverse passes (from N_C(0, I)) as E-steps.

    ``noise_var`` fixes v_phi (no NMF); otherwise v_phi = W H is re-estimated
    after each E-step from the mean residual power of the posterior samples.
    """
    x = np.asarray(x, dtype=complex)
    sc = cfg.sampler()
    sched = sc.schedule
    params, v = _init_nmf(x, cfg, rng, noise_var)
    log = TrajectoryLog()
    samples = []
    for em in range(cfg.em_iters):
        samples = []
        for _ in range(cfg.posterior_samples):
            s = complex_normal(rng, x.shape)
            for i in range(sched.N, 1, -1):
                s_b = pc_step(s, speech_score, sc, i, rng, SPEECH)
                grad = pseudo_likelihood_grad_implicit(x, s_b, v, sched, i)
                s = check_finite(guided_update(s_b, grad, sched, i, cfg.lam), i, "guided state")
            samples.append(final_denoise(s, speech_score, sched, SPEECH))
        if params is not None and cfg.m_step:
            V = np.mean([np.abs(x - sb) ** 2 for sb in samples], axis=0)
            params = m_step_nmf(V, params, cfg.nmf_iters, cfg.nmf_exponent)
            v = params.variance
            log.record(em_iter=em, divergence=nmf.is_divergence(V, params))
    s_hat = np.mean(samples, axis=0)
    return EnhanceResult(speech=s_hat, noise=implicit_noise_estimate(x, s_hat, v),
                         nmf=params, log=log)


def udiffse_plus(x, speech_score: ScoreModel, cfg: EnhanceConfig, rng: np.random.Generator,
                 noise_var=None) -> EnhanceResult:
    """Single guided pass; the NMF is updated after every step from the Tweedie estimate."""
    x = np.asarray(x, dtype=complex)
    sc = cfg.sampler()
    sched = sc.schedule
    params, v = _init_nmf(x, cfg, rng, noise_var)
    log = TrajectoryLog()
    s = _warm_start(x, sched, rng)
    for i in range(sched.N, 1, -1):
        s_b = pc_step(s, speech_score, sc, i, rng, SPEECH)
        s0 = tweedie_denoise(s_b, speech_score(s_b, sched.tau_at(i), SPEECH), sched, i)
        grad = pseudo_likelihood_grad_implicit(x, s_b, v, sched, i)
        s = check_finite(guided_update(s_b, grad, sched, i, cfg.lam), i, "guided state")
        if params is not None and cfg.m_step:
            params = m_step_nmf(np.abs(x - s0) ** 2, params, cfg.nmf_iters, cfg.nmf_exponent)
            v = params.variance
        log.record(step=i, lam=cfg.lam.at(sched, i), guidance=np.linalg.norm(grad))
    s_hat = final_denoise(s, speech_score, sched, SPEECH)
    return EnhanceResult(speech=s_hat, noise=implicit_noise_estimate(x, s_hat, v),
                         nmf=params, log=log)


def diffuseen(x, speech_score: ScoreModel, cfg: EnhanceConfig, rng: np.random.Generator,
              noise_var=None) -> EnhanceResult:
    """Explicit-noise EM: speech by guided diffusion, noise by its Gaussian posterior.

    Per step: PC step, Tweedie speech estimate, noise posterior given that
    estimate, speech guidance using the posterior noise mean, then an NMF
    update on ``|mu_n|^2 + Sigma_n``. The returned noise is the posterior mean
    given the final speech estimate.
    """
    x = np.asarray(x, dtype=complex)
    sc = cfg.sampler()
    sched = sc.schedule
    params, v = _init_nmf(x, cfg, rng, noise_var)
    log = TrajectoryLog()
    s = _warm_start(x, sched, rng)
    for i in range(sched.N, 1, -1):
        s_b = pc_step(s, speech_score, sc, i, rng, SPEECH)
        s0 = tweedie_denoise(s_b, speech_score(s_b, sched.tau_at(i), SPEECH), sched, i)
        post = noise_posterior(x, s0, v, cfg.sigma_r2)
        grad = pseudo_likelihood_grad_explicit(x, s_b, post.mu_n, cfg.sigma_r2, sched, i)
        s = check_finite(guided_update(s_b, grad, sched, i, cfg.lam), i, "guided state")
        if params is not None and cfg.m_step:
            params = m_step_nmf(np.abs(post.mu_n) ** 2 + post.Sigma_n, params,
                                cfg.nmf_iters, cfg.nmf_exponent)
            v = params.variance
        log.record(step=i, lam=cfg.lam.at(sched, i), guidance=np.linalg.norm(grad))
    s_hat = final_denoise(s, speech_score, sched, SPEECH)
    n_hat = noise_posterior(x, s_hat, v, cfg.sigma_r2).mu_n
    return EnhanceResult(speech=s_hat, noise=n_hat, nmf=params, log=log)


def paradiffuse_in(x, joint_score: ScoreModel, cfg: EnhanceConfig,
                   rng: np.random.Generator) -> EnhanceResult:
    """Speech posterior sampling with the noise integrated out through its score model."""
    x = np.asarray(x, dtype=complex)
    sc = cfg.sampler()
    sched = sc.schedule
    log = TrajectoryLog()
    s = _warm_start(x, sched, rng)
    for i in range(sched.N, 1, -1):
        s_b = pc_step(s, joint_score, sc, i, rng, SPEECH)
        grad, _ = noise_score_guidance(x, s_b, joint_score, sched, i, rng)
        s = check_finite(guided_update(s_b, grad, sched, i, cfg.lam), i, "guided state")
        log.record(step=i, lam=cfg.lam.at(sched, i), guidance=np.linalg.norm(grad))
    s_hat = final_denoise(s, joint_score, sched, SPEECH)
    return EnhanceResult(speech=s_hat, noise=x - s_hat, log=log)


def paradiffuse_en(x, joint_score: ScoreModel, cfg: EnhanceConfig, rng: np.random.Generator,
                   wiener: bool = True) -> EnhanceResult:
    """Joint speech/noise posterior sampling with cross guidance and a Wiener post-filter."""
    x = np.asarray(x, dtype=complex)
    sc = cfg.sampler()
    sched = sc.schedule
    log = TrajectoryLog()
    s = x + complex_normal(rng, x.shape)
    n = (x - s) + complex_normal(rng, x.shape)
    for i in range(sched.N, 1, -1):
        backs, tweedies = {}, {}
        for label, a in ((SPEECH, s), (NOISE, n)):
            h = a
            if sc.corrector_enabled:
                h = corrector_step(a, joint_score, sc, i, rng, label)
            _, a_b = predictor_step(h, joint_score, sc, i, rng, label)
            backs[label] = check_finite(a_b, i, "predictor output")
            tweedies[label] = tweedie_denoise(
                a_b, joint_score(a_b, sched.tau_at(i), label), sched, i)
        grad_s = pseudo_likelihood_grad_explicit(x, backs[SPEECH], tweedies[NOISE],
                                                 cfg.sigma_r2, sched, i)
        grad_n = pseudo_likelihood_grad_explicit(x, backs[NOISE], tweedies[SPEECH],
                                                 cfg.sigma_r2, sched, i)
        s = check_finite(guided_update(backs[SPEECH], grad_s, sched, i, cfg.lam), i, "speech")
        n = check_finite(guided_update(backs[NOISE], grad_n, sched, i, cfg.lam), i, "noise")
        log.record(step=i, lam=cfg.lam.at(sched, i), guidance_s=np.linalg.norm(grad_s),
                   guidance_n=np.linalg.norm(grad_n))
    s0 = final_denoise(s, joint_score, sched, SPEECH)
    n0 = final_denoise(n, joint_score, sched, NOISE)
    if wiener:
        s_hat, n_hat = wiener_postfilter(s0, n0, x)
    else:
        s_hat, n_hat = s0, n0
    return EnhanceResult(speech=s_hat, noise=n_hat, speech_prefilter=s0, noise_prefilter=n0,
                         log=log)


def enhance(x, model: ScoreModel, cfg: EnhanceConfig, rng: np.random.Generator | None = None,
            noise_var=None) -> EnhanceResult:
    """Dispatch on ``cfg.algorithm``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    alg = cfg.algorithm
    if alg.startswith("paradiffuse"):
        if not model.conditional:
            raise ValueError(f"{alg} needs a label-conditioned (speech/noise) score model")
        if noise_var is not None:
            raise ValueError(f"{alg} has no NMF noise model to fix")
        fn = paradiffuse_in if alg == "paradiffuse-in" else paradiffuse_en
        return fn(x, model, cfg, rng)
    fn = {"udiffse": udiffse, "udiffse+": udiffse_plus, "diffuseen": diffuseen}[alg]
    return fn(x, model, cfg, rng, noise_var=noise_var)
