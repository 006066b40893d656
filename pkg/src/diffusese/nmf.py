"""Itakura-Saito NMF of nonnegative power fields, V ~ W H."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

FLOOR = 1e-10
V_FLOOR = 1e-12


@dataclass(frozen=True)
class NmfParams:
    W: np.ndarray  # (F, K) spectral templates
    H: np.ndarray  # (K, L) activations
    floor: float = FLOOR

    def __post_init__(self):
        if self.W.ndim != 2 or self.H.ndim != 2 or self.W.shape[1] != self.H.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.W.shape}, {self.H.shape}")

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    @property
    def variance(self) -> np.ndarray:
        """The variance field v_phi = W H, shape (F, L)."""
        return self.W @ self.H

    def to_csv(self) -> tuple[str, str]:
        out = []
        for M in (self.W, self.H):
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows(M.tolist())
            out.append(buf.getvalue())
        return out[0], out[1]


def _check_power(V):
    V = np.asarray(V, dtype=float)
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ValueError("power field must be finite and nonnegative")
    return V


def is_divergence(V, params: NmfParams | np.ndarray) -> float:
    """Sum over bins of V/v - log(V/v) - 1, with V floored at 1e-12."""
    V = np.maximum(_check_power(V), V_FLOOR)
    v = params.variance if isinstance(params, NmfParams) else np.asarray(params, dtype=float)
    q = V / v
    return float(np.sum(q - np.log(q) - 1.0))


def mu_update(V, params: NmfParams, exponent: float = 0.5) -> NmfParams:
    """One pass of multiplicative updates (W then H) for the IS divergence.

    ``exponent=0.5`` is the majorization-minimization form, which guarantees
    a nonincreasing divergence; ``exponent=1`` gives the classic heuristic rule.
    """
    V = np.maximum(_check_power(V), V_FLOOR)
    W, H, fl = params.W, params.H, params.floor

    Vh = W @ H
    W = W * ((V / Vh**2) @ H.T / ((1.0 / Vh) @ H.T)) ** exponent
    W = np.maximum(W, fl)

    Vh = W @ H
    H = H * (W.T @ (V / Vh**2) / (W.T @ (1.0 / Vh))) ** exponent
    H = np.maximum(H, fl)
    return NmfParams(W=W, H=H, floor=fl)


def init_params(V, rank: int, rng: np.random.Generator, floor: float = FLOOR) -> NmfParams:
    """Uniform(0.5, 1.5) entries scaled by sqrt(mean(V) / K)."""
    V = _check_power(V)
    if rank < 1:
        raise ValueError("rank must be >= 1")
    F, L = V.shape
    scale = np.sqrt(max(float(V.mean()), V_FLOOR) / rank)
    W = rng.uniform(0.5, 1.5, (F, rank)) * scale
    H = rng.uniform(0.5, 1.5, (rank, L)) * scale
    return NmfParams(W=np.maximum(W, floor), H=np.maximum(H, floor), floor=floor)


def fit(V, rank: int, iters: int, rng: np.random.Generator, exponent: float = 0.5,
        history: list | None = None) -> NmfParams:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    params = init_params(V, rank, rng)
    for _ in range(iters):
        params = mu_update(V, params, exponent)
        if history is not None:
            history.append(is_divergence(V, params))
    return params
