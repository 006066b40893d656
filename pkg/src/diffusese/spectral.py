"""STFT analysis/synthesis, spectrogram amplitude transforms, Wiener post-filter, WAV I/O.

Spectrograms are plain complex numpy arrays of shape ``(F, L)`` (frequency
bins by frames); :func:`flatten` / :func:`unflatten` convert to the 1-D
vector view used by the estimation equations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 510
    hop: int = 128
    window: str = "hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.window_len < 1 or self.hop < 1:
            raise ValueError("window_len and hop must be positive")
        if self.hop > self.window_len:
            raise ValueError(f"hop {self.hop} exceeds window length {self.window_len}")
        if self.window not in ("hann", "sqrt_hann"):
            raise ValueError(f"unsupported window {self.window!r}")
        w = self.window_array()
        # overlap-add of w^2 must be bounded away from zero for synthesis
        ola = np.zeros(self.hop)
        for k in range(0, self.window_len, 1):
            ola[k % self.hop] += w[k] ** 2
        if ola.min() <= 1e-8 * ola.max():
            raise ValueError("window/hop pair violates the overlap-add condition")

    @property
    def n_freq(self) -> int:
        return self.window_len // 2 + 1

    def window_array(self) -> np.ndarray:
        n = np.arange(self.window_len)
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_len)  # periodic Hann
        return np.sqrt(w) if self.window == "sqrt_hann" else w

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop


def flatten(spec: np.ndarray) -> np.ndarray:
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError("spectrogram must be 2-D (F, L)")
    return spec.reshape(-1)


def unflatten(vec, n_freq: int, n_frames: int) -> np.ndarray:
    vec = np.asarray(vec)
    if n_freq < 1 or n_frames < 1 or vec.size != n_freq * n_frames:
        raise ValueError(f"cannot view {vec.size} values as ({n_freq}, {n_frames})")
    return vec.reshape(n_freq, n_frames)


def stft(signal, cfg: StftConfig) -> np.ndarray:
    """One-sided STFT with centred frames (reflect padding), shape (F, L)."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("only mono signals are supported")
    if x.shape[0] < cfg.window_len:
        raise ValueError(
            f"signal has {x.shape[0]} samples, shorter than the {cfg.window_len}-sample window"
        )
    pad = cfg.window_len // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = cfg.n_frames(x.shape[0])
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.window_len)[::cfg.hop][:n_frames]
    return np.fft.rfft(frames * cfg.window_array(), axis=1).T


def istft(spec, cfg: StftConfig, out_len: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``out_len`` samples."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.n_freq:
        raise ValueError(f"spectrogram shape {spec.shape} inconsistent with F={cfg.n_freq}")
    if cfg.n_frames(out_len) != spec.shape[1]:
        raise ValueError(
            f"{spec.shape[1]} frames cannot synthesize {out_len} samples "
            f"(expected {cfg.n_frames(out_len)})"
        )
    w = cfg.window_array()
    frames = np.fft.irfft(spec.T, n=cfg.window_len, axis=1) * w
    n_frames = spec.shape[1]
    total = cfg.window_len + cfg.hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for k in range(n_frames):
        s = k * cfg.hop
        y[s:s + cfg.window_len] += frames[k]
        norm[s:s + cfg.window_len] += w * w
    pad = cfg.window_len // 2
    y = y[pad:pad + out_len]
    norm = norm[pad:pad + out_len]
    return y / np.where(norm > 1e-10, norm, 1.0)


@dataclass(frozen=True)
class AmplitudeTransform:
    """Magnitude compression ``beta |X|^alpha e^{i angle X}`` and its inverse.

    The defaults (alpha=1, beta=1) are the identity.
    """

    alpha: float = 1.0
    beta: float = 1.0

    def forward(self, spec):
        spec = np.asarray(spec, dtype=complex)
        if self.alpha == 1.0 and self.beta == 1.0:
            return spec.copy()
        return self.beta * np.abs(spec) ** self.alpha * np.exp(1j * np.angle(spec))

    def inverse(self, spec):
        spec = np.asarray(spec, dtype=complex)
        if self.alpha == 1.0 and self.beta == 1.0:
            return spec.copy()
        return (np.abs(spec) / self.beta) ** (1.0 / self.alpha) * np.exp(1j * np.angle(spec))


def wiener_postfilter(s0, n0, x):
    """Rescale magnitudes so that |s|^2 + |n|^2 = |x|^2 per bin, keeping phases.

    Bins where both estimates vanish get s = x, n = 0.
    """
    s0, n0, x = (np.asarray(a, dtype=complex) for a in (s0, n0, x))
    if not (s0.shape == n0.shape == x.shape):
        raise ValueError(f"shape mismatch {s0.shape}, {n0.shape}, {x.shape}")
    energy = np.abs(s0) ** 2 + np.abs(n0) ** 2
    dead = energy == 0
    gain = np.abs(x) / np.sqrt(np.where(dead, 1.0, energy))
    s = np.where(dead, x, gain * s0)
    n = np.where(dead, 0.0, gain * n0)
    return s, n


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path, expected_rate: int | None = 16000) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM or 32-bit float WAV as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return x, rate


def write_wav(path, signal, rate: int = 16000) -> int:
    """Write 32-bit float WAV, clipping to [-1, 1]; returns the number of clipped samples."""
    x = np.asarray(signal, dtype=np.float64)
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        logger.warning("%s: clipped %d samples to [-1, 1]", path, clipped)
    wavfile.write(path, rate, np.clip(x, -1.0, 1.0).astype(np.float32))
    return clipped
