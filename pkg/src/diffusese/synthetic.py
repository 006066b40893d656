"""Synthetic corpora for verification without external data.

Speech spectrograms follow a two-component complex GMM (active / inactive
with a decaying spectral envelope) whose component is switched per frame.
Noise is zero-mean complex Gaussian with a rank-1 NMF variance field ``w h^T``.
Time-domain signals are obtained by inverse STFT and mixed at a target SNR
measured on time-domain energies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .score import GaussianScore, GmmScore
from .sde import SdeParams, complex_normal
from .spectral import StftConfig, istft, stft


def consistency_gain(cfg: StftConfig) -> float:
    """Energy inflation compensating the projection of a random grid onto STFTs of signals.

    A white complex grid keeps about ``hop / (2 F)`` of its energy after an
    ``istft`` / ``stft`` round trip, so fields are drawn with variances scaled
    by the reciprocal to land on the nominal level.
    """
    return 2.0 * cfg.n_freq / cfg.hop


def speech_envelope(n_freq: int, level: float = 1.0, tilt: float = 3.0) -> np.ndarray:
    """Decaying envelope normalized to mean ``level``, shape (F, 1)."""
    env = np.exp(-tilt * np.arange(n_freq) / n_freq)
    return (level * env / env.mean())[:, None]


def speech_gmm_prior(n_freq: int, sde: SdeParams, level: float = 1.0, active: float = 0.4,
                     floor_ratio: float = 0.02) -> GmmScore:
    """Per-bin mixture of an active component and a quiet component."""
    if not 0 < active < 1:
        raise ValueError("active weight must be in (0, 1)")
    env = speech_envelope(n_freq, level / (active + (1 - active) * floor_ratio))
    variances = np.stack([env, floor_ratio * env])
    return GmmScore([active, 1 - active], np.zeros((2, 1, 1)), variances, sde)


def sample_gmm(prior: GmmScore, shape, rng: np.random.Generator) -> np.ndarray:
    """Draw a grid from a factorized GMM prior (element-wise component choice)."""
    w = prior.weights
    comp = rng.choice(len(w), size=shape, p=w)
    var = np.broadcast_to(prior.variances, (len(w),) + tuple(shape))
    mean = np.broadcast_to(prior.means, (len(w),) + tuple(shape))
    v = np.take_along_axis(var, comp[None], 0)[0]
    m = np.take_along_axis(mean, comp[None], 0)[0]
    return m + np.sqrt(v) * complex_normal(rng, shape)


def sample_speech(prior: GmmScore, shape, rng: np.random.Generator, stay: float = 0.8) -> np.ndarray:
    """Speech-like grid: whole frames switch between the prior's components.

    Frame activity follows a two-state Markov chain whose stationary
    distribution matches the prior weights, so the per-bin marginal is the
    prior while activity comes in contiguous runs (which survives resynthesis).
    """
    F, L = shape
    p_active = float(prior.weights[0])
    if not 0 <= stay < 1:
        raise ValueError("stay must be in [0, 1)")
    active = np.empty(L, dtype=bool)
    active[0] = rng.uniform() < p_active
    for t in range(1, L):
        p = stay + (1 - stay) * p_active if active[t - 1] else (1 - stay) * p_active
        active[t] = rng.uniform() < p
    var = np.broadcast_to(prior.variances, (2, F, L))
    v = np.where(active[None, :], var[0], var[1])
    return np.sqrt(v) * complex_normal(rng, shape)


def gaussian_fields(n_fields: int, shape, var, rng: np.random.Generator) -> list:
    """Independent draws from N_C(0, diag(var))."""
    sd = np.sqrt(np.asarray(var, dtype=float))
    return [sd * complex_normal(rng, shape) for _ in range(n_fields)]


def rank1_noise(n_freq: int, n_frames: int, rng: np.random.Generator, level: float = 1.0):
    """Random rank-1 factors (w, h) with mean(w h^T) = level."""
    tilt = rng.uniform(-2.0, 2.0)
    w = np.exp(tilt * np.linspace(0, 1, n_freq) + 0.3 * rng.standard_normal(n_freq))
    h = rng.gamma(4.0, 0.25, n_frames)
    w *= level / (w.mean() * h.mean())
    return w, h


def noise_gaussian_prior(w, sde: SdeParams, level: float = 1.0) -> GaussianScore:
    """Stationary per-frequency Gaussian prior with mean power ``level``."""
    w = np.asarray(w, dtype=float)
    return GaussianScore(0.0, (level * w / w.mean())[:, None], sde)


@dataclass
class Mixture:
    speech: np.ndarray  # time domain
    noise: np.ndarray
    mixture: np.ndarray
    noise_w: np.ndarray  # rank-1 factors of the nominal noise variance field
    noise_h: np.ndarray
    noise_scale: float  # amplitude factor applied to reach the target SNR

    @property
    def noise_power(self) -> np.ndarray:
        return self.noise_scale**2 * np.outer(self.noise_w, self.noise_h)


def snr_db(speech, noise) -> float:
    return float(10 * np.log10(np.sum(np.square(speech)) / np.sum(np.square(noise))))


def make_mixture(rng: np.random.Generator, n_samples: int, cfg: StftConfig,
                 speech_prior: GmmScore, noise_w=None, snr: float = 0.0) -> Mixture:
    """GMM speech plus rank-1 NMF noise, mixed at ``snr`` dB (time-domain energies)."""
    F, L = cfg.n_freq, cfg.n_frames(n_samples)
    gain = np.sqrt(consistency_gain(cfg))
    S = sample_speech(speech_prior, (F, L), rng)
    s = istft(gain * S, cfg, n_samples)
    w, h = rank1_noise(F, L, rng)
    if noise_w is not None:
        w = np.asarray(noise_w, dtype=float) * (w.mean() / np.mean(noise_w))
    Nf = np.sqrt(np.outer(w, h)) * complex_normal(rng, (F, L))
    n = istft(gain * Nf, cfg, n_samples)
    scale = float(10 ** ((snr_db(s, n) - snr) / 20))
    n = scale * n
    return Mixture(speech=s, noise=n, mixture=s + n, noise_w=w, noise_h=h, noise_scale=scale)


def mixture_spectra(mix: Mixture, cfg: StftConfig):
    """STFTs of (mixture, speech, noise)."""
    return stft(mix.mixture, cfg), stft(mix.speech, cfg), stft(mix.noise, cfg)
