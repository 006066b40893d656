"""Scale-invariant separation metrics and the mixture-consistency residual.

Scores that are mathematically infinite (a perfect estimate, up to a residual
energy 240 dB below the target) are returned as ``math.inf``. :func:`capped`
maps them to a finite value for tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

REPORT_CAP_DB = 60.0
EXACT_RATIO = 1e-24


@dataclass(frozen=True)
class SeparationScores:
    si_sdr: float
    si_sir: float
    si_sar: float

    def capped(self, cap: float = REPORT_CAP_DB) -> dict:
        return {k: capped(v, cap) for k, v in
                (("si_sdr", self.si_sdr), ("si_sir", self.si_sir), ("si_sar", self.si_sar))}


def capped(value: float, cap: float = REPORT_CAP_DB) -> float:
    return float(min(max(value, -cap), cap))


def _ratio_db(num: float, den: float) -> float:
    if num == 0.0:
        return -math.inf
    if den <= EXACT_RATIO * num:  # residual at round-off level
        return math.inf
    return 10.0 * math.log10(num / den)


def _pair(estimate, reference):
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValueError("reference signal is all zeros")
    return est, ref


def si_sdr(estimate, reference) -> float:
    """10 log10(|a s|^2 / |e - a s|^2) with a = <e, s> / |s|^2."""
    est, ref = _pair(estimate, reference)
    alpha = np.dot(est, ref) / np.dot(ref, ref)
    target = alpha * ref
    return _ratio_db(float(np.dot(target, target)), float(np.sum((est - target) ** 2)))


def projections(estimate, reference_speech, reference_noise):
    """Return (e_target, e_interf, e_artif) of the orthogonal decomposition."""
    est, s = _pair(estimate, reference_speech)
    _, n = _pair(estimate, reference_noise)
    G = np.array([[s @ s, s @ n], [n @ s, n @ n]])
    if abs(np.linalg.det(G)) <= 1e-12 * G[0, 0] * G[1, 1]:
        raise ValueError("speech and noise references are collinear")
    coef = np.linalg.solve(G, np.array([est @ s, est @ n]))
    both = coef[0] * s + coef[1] * n
    target = (est @ s) / (s @ s) * s
    return target, both - target, est - both


def si_decomposition(estimate, reference_speech, reference_noise) -> SeparationScores:
    target, interf, artif = projections(estimate, reference_speech, reference_noise)
    et = float(target @ target)
    est = np.asarray(estimate, dtype=float)
    return SeparationScores(
        si_sdr=_ratio_db(et, float(np.sum((est - target) ** 2))),
        si_sir=_ratio_db(et, float(interf @ interf)),
        si_sar=_ratio_db(et, float(artif @ artif)),
    )


def mixture_consistency(x, s_hat, n_hat) -> float:
    """||x - (s_hat + n_hat)|| / ||x||."""
    x, s_hat, n_hat = (np.asarray(a) for a in (x, s_hat, n_hat))
    if not (x.shape == s_hat.shape == n_hat.shape):
        raise ValueError(f"shape mismatch {x.shape}, {s_hat.shape}, {n_hat.shape}")
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("mixture is all zeros")
    return float(np.linalg.norm(x - (s_hat + n_hat)) / nx)
