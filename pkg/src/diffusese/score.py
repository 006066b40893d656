"""Score models: analytic Gaussian / GMM oracles and a tiny trainable network.

Complex gradient convention: for a real log-density ``lp`` of complex ``a``,
the score is ``0.5 * (d lp / d Re a + 1j * d lp / d Im a)``. Under this
convention the score of ``N_C(m, v)`` is ``-(a - m) / v`` and the DSM target
for ``a_t = delta a0 + sigma zeta`` is ``-zeta / sigma``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .sde import SdeParams, complex_normal

logger = logging.getLogger(__name__)

SPEECH = 1
NOISE = 0
LABELS = {"speech": SPEECH, "noise": NOISE}

MODEL_FORMAT = "diffusese-score"
MODEL_VERSION = 1


class ScoreModel:
    """Base class. Subclasses implement ``_score(a, t, label)``."""

    conditional = False

    def __init__(self, sde: SdeParams):
        self.sde = sde

    def __call__(self, a, t, label=None):
        return score(self, a, t, label)

    def _score(self, a, t, label):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def score(model: ScoreModel, a, t: float, label: int | None = None) -> np.ndarray:
    """Evaluate the score of ``model`` at state ``a`` and diffusion time ``t``."""
    if not t > 0:
        raise ValueError(f"score queried at non-positive time {t}")
    if model.conditional and label is None:
        raise ValueError("conditional score model needs a label (speech=1, noise=0)")
    a = np.asarray(a, dtype=complex)
    out = model._score(a, float(t), label)
    if out.shape != a.shape:
        out = np.broadcast_to(out, a.shape).copy()
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite score at t={t}")
    return out


class GaussianScore(ScoreModel):
    """Exact score of the perturbed marginal of a diagonal complex Gaussian prior.

    ``mean`` and ``var`` broadcast against the state (e.g. an ``(F, 1)`` column
    models a per-frequency prior for any number of frames).
    """

    def __init__(self, mean, var, sde: SdeParams):
        super().__init__(sde)
        self.mean = np.asarray(mean, dtype=complex)
        self.var = np.asarray(var, dtype=float)
        if np.any(self.var <= 0):
            raise ValueError("Gaussian prior variance must be > 0")

    def marginal(self, t):
        d = float(self.sde.delta(t))
        return d * self.mean, d**2 * self.var + float(self.sde.sigma2(t))

    def _score(self, a, t, label):
        m, v = self.marginal(t)
        return -(a - m) / v

    def log_density(self, a, t) -> float:
        m, v = self.marginal(t)
        a = np.asarray(a, dtype=complex)
        lp = -np.abs(a - m) ** 2 / v - np.log(np.pi * v)
        return float(np.sum(np.broadcast_to(lp, a.shape)))

    def posterior_mean(self, a, t):
        """Exact E[a0 | a_t = a]."""
        d = float(self.sde.delta(t))
        s2 = float(self.sde.sigma2(t))
        return self.mean + d * self.var / (d**2 * self.var + s2) * (a - d * self.mean)

    def to_dict(self):
        return {"kind": "gaussian", "mean": _cplx(self.mean), "var": _real(self.var)}


class GmmScore(ScoreModel):
    """Score of a perturbed diagonal complex Gaussian mixture.

    With ``factorized=True`` every element is an independent mixture (weights,
    means and variances broadcast per element); otherwise the components are
    joint over the whole grid and responsibilities pool all elements.
    """

    def __init__(self, weights, means, variances, sde: SdeParams, factorized: bool = True):
        super().__init__(sde)
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.asarray(means, dtype=complex)
        self.variances = np.asarray(variances, dtype=float)
        self.factorized = factorized
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape[0] != k:
            raise ValueError("component parameter arrays need the same leading size")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=0), 1.0):
            raise ValueError("mixture weights must be >= 0 and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("mixture variances must be > 0")

    def _components(self, a, t):
        d = float(self.sde.delta(t))
        s2 = float(self.sde.sigma2(t))
        m = d * self.means
        v = d**2 * self.variances + s2
        # loglik[k, ...] per element
        loglik = -np.abs(a[None] - m) ** 2 / v - np.log(np.pi * v)
        loglik = np.broadcast_to(loglik, (self.weights.shape[0],) + a.shape)
        return m, v, loglik

    def responsibilities(self, a, t):
        _, _, loglik = self._components(a, t)
        logw = np.log(np.maximum(self.weights, 1e-300))
        if self.factorized:
            logw = np.broadcast_to(logw.reshape(logw.shape + (1,) * (a.ndim + 1 - logw.ndim)),
                                   loglik.shape)
            joint = logw + loglik
            return np.exp(joint - logsumexp(joint, axis=0, keepdims=True))
        per = logw.reshape(-1) + loglik.reshape(loglik.shape[0], -1).sum(axis=1)
        r = np.exp(per - logsumexp(per))
        return np.broadcast_to(r.reshape((-1,) + (1,) * a.ndim), loglik.shape)

    def _score(self, a, t, label):
        m, v, _ = self._components(a, t)
        r = self.responsibilities(a, t)
        return np.sum(r * (-(a[None] - m) / v), axis=0)

    def log_density(self, a, t) -> float:
        a = np.asarray(a, dtype=complex)
        _, _, loglik = self._components(a, t)
        logw = np.log(np.maximum(self.weights, 1e-300))
        if self.factorized:
            logw = logw.reshape(logw.shape + (1,) * (a.ndim + 1 - logw.ndim))
            return float(np.sum(logsumexp(logw + loglik, axis=0)))
        per = logw.reshape(-1) + loglik.reshape(loglik.shape[0], -1).sum(axis=1)
        return float(logsumexp(per))

    def posterior_mean(self, a, t):
        """Exact E[a0 | a_t = a] (mixture of per-component Gaussian posteriors)."""
        d = float(self.sde.delta(t))
        s2 = float(self.sde.sigma2(t))
        r = self.responsibilities(a, t)
        gain = d * self.variances / (d**2 * self.variances + s2)
        comp = self.means + gain * (a[None] - d * self.means)
        return np.sum(r * comp, axis=0)

    def to_dict(self):
        return {
            "kind": "gmm",
            "factorized": self.factorized,
            "weights": _real(self.weights),
            "means": _cplx(self.means),
            "variances": _real(self.variances),
        }


class ConditionalScore(ScoreModel):
    """Label-conditioned wrapper around one unconditional model per label."""

    conditional = True

    def __init__(self, models: Mapping[int, ScoreModel]):
        sdes = {m.sde for m in models.values()}
        if len(sdes) != 1:
            raise ValueError("all label models must share the same SDE")
        super().__init__(sdes.pop())
        self.models = dict(models)

    def _score(self, a, t, label):
        try:
            model = self.models[int(label)]
        except KeyError:
            raise ValueError(f"no model for label {label}") from None
        return model._score(a, t, None)

    def to_dict(self):
        return {
            "kind": "conditional",
            "models": {str(k): m.to_dict() for k, m in sorted(self.models.items())},
        }


# ---------------------------------------------------------------------------
# Toy network trained by denoising score matching
# ---------------------------------------------------------------------------


@dataclass
class DsmTrainConfig:
    steps: int = 3000
    batch_size: int = 256
    learning_rate: float = 0.05
    t_eps: float = 0.03
    T: float = 1.0
    seed: int = 0
    speech_fraction: float = 0.5

    def __post_init__(self):
        if not self.t_eps > 0:
            raise ValueError("t_eps must be > 0")
        if not self.t_eps < self.T:
            raise ValueError("t_eps must be < T")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.speech_fraction <= 1.0:
            raise ValueError("speech_fraction must be in [0, 1]")


@dataclass
class DsmBatch:
    """One DSM minibatch of independent elements."""

    a0: np.ndarray  # complex (B,)
    t: np.ndarray  # (B,)
    zeta: np.ndarray  # complex (B,)
    labels: np.ndarray = field(default=None)  # int (B,) or None

    def __len__(self):
        return self.a0.shape[0]


class ToyScoreNet(ScoreModel):
    """Element-wise two-layer score network with FiLM-style label modulation.

    Per element the input is ``[Re a, Im a, sin(k log sigma), cos(k log sigma)]``
    and the network predicts ``sigma(t) * score``, so the DSM residual is simply
    ``output + zeta``.
    """

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "film1_scale", "film1_shift",
                   "film2_scale", "film2_shift")

    def __init__(self, params: dict, sde: SdeParams, n_time_freqs: int = 2,
                 conditional: bool = False):
        super().__init__(sde)
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        self.n_time_freqs = n_time_freqs
        self.conditional = conditional

    @classmethod
    def init(cls, sde: SdeParams, hidden: int = 32, n_time_freqs: int = 2,
             conditional: bool = False, rng: np.random.Generator | None = None,
             zero: bool = False):
        rng = np.random.default_rng(0) if rng is None else rng
        d_in = 2 + 2 * n_time_freqs
        n_lab = 2 if conditional else 1
        if zero:
            W1 = np.zeros((hidden, d_in))
            W2 = np.zeros((2, hidden))
        else:
            W1 = rng.standard_normal((hidden, d_in)) / math.sqrt(d_in)
            W2 = rng.standard_normal((2, hidden)) * (0.1 / math.sqrt(hidden))
        params = {
            "W1": W1,
            "b1": np.zeros(hidden) if zero else 0.1 * rng.standard_normal(hidden),
            "W2": W2,
            "b2": np.zeros(2),
            "film1_scale": np.zeros((n_lab, hidden)),
            "film1_shift": np.zeros((n_lab, hidden)),
            "film2_scale": np.zeros((n_lab, 2)),
            "film2_shift": np.zeros((n_lab, 2)),
        }
        return cls(params, sde, n_time_freqs=n_time_freqs, conditional=conditional)

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[0]

    def features(self, a, t):
        a = np.asarray(a, dtype=complex).reshape(-1)
        t = np.broadcast_to(np.asarray(t, dtype=float), a.shape)
        ls = 0.5 * np.log(self.sde.sigma2(t))
        cols = [a.real, a.imag]
        for k in range(1, self.n_time_freqs + 1):
            cols += [np.sin(k * ls), np.cos(k * ls)]
        return np.stack(cols, axis=1)

    def _label_index(self, labels, n):
        if not self.conditional:
            return np.zeros(n, dtype=int)
        return np.broadcast_to(np.asarray(labels, dtype=int), (n,))

    def _forward(self, x, lab):
        p = self.params
        z = x @ p["W1"].T + p["b1"]
        u = z * (1.0 + p["film1_scale"][lab]) + p["film1_shift"][lab]
        h = np.tanh(u)
        o = h @ p["W2"].T + p["b2"]
        y = o * (1.0 + p["film2_scale"][lab]) + p["film2_shift"][lab]
        return y, (z, h, o)

    def scaled_output(self, a, t, labels=None):
        """Network output ``sigma(t) * S(a, t)`` as complex values, flat."""
        x = self.features(a, t)
        y, _ = self._forward(x, self._label_index(labels, x.shape[0]))
        return y[:, 0] + 1j * y[:, 1]

    def _score(self, a, t, label):
        out = self.scaled_output(a, t, label) / math.sqrt(float(self.sde.sigma2(t)))
        return out.reshape(a.shape)

    # -- DSM objective -------------------------------------------------------

    def loss_and_grad(self, batch: DsmBatch, need_grad: bool = True):
        p = self.params
        x = self.features(_perturbed(batch, self.sde), batch.t)
        lab = self._label_index(batch.labels, x.shape[0])
        y, (z, h, o) = self._forward(x, lab)
        zeta = np.stack([batch.zeta.real, batch.zeta.imag], axis=1)
        r = y + zeta
        B = x.shape[0]
        loss = float(np.sum(r * r) / B)
        if not need_grad:
            return loss, None
        dy = 2.0 * r / B
        g = {k: np.zeros_like(v) for k, v in p.items()}
        np.add.at(g["film2_scale"], lab, dy * o)
        np.add.at(g["film2_shift"], lab, dy)
        do = dy * (1.0 + p["film2_scale"][lab])
        g["W2"] = do.T @ h
        g["b2"] = do.sum(axis=0)
        du = (do @ p["W2"]) * (1.0 - h * h)
        np.add.at(g["film1_scale"], lab, du * z)
        np.add.at(g["film1_shift"], lab, du)
        dz = du * (1.0 + p["film1_scale"][lab])
        g["W1"] = dz.T @ x
        g["b1"] = dz.sum(axis=0)
        return loss, g

    def to_dict(self):
        return {
            "kind": "toy_net",
            "hidden": self.hidden,
            "n_time_freqs": self.n_time_freqs,
            "conditional": self.conditional,
            "params": {k: self.params[k].tolist() for k in self.PARAM_NAMES},
        }


def _perturbed(batch: DsmBatch, sde: SdeParams):
    return sde.delta(batch.t) * batch.a0 + np.sqrt(sde.sigma2(batch.t)) * batch.zeta


def dsm_loss(model: ToyScoreNet, batch: DsmBatch) -> float:
    """Mean over elements of ``|sigma(t) S(a_t, t) + zeta|^2``."""
    return model.loss_and_grad(batch, need_grad=False)[0]


def dsm_loss_gradient(model: ToyScoreNet, batch: DsmBatch) -> dict:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return model.loss_and_grad(batch)[1]


def sample_batch(pool: np.ndarray, labels: np.ndarray | None, cfg: DsmTrainConfig,
                 rng: np.random.Generator, size: int | None = None,
                 label_pools: dict | None = None) -> DsmBatch:
    """Draw a DSM batch from a flat element pool (or from per-label pools)."""
    size = cfg.batch_size if size is None else size
    if label_pools:
        n_speech = int(rng.binomial(size, cfg.speech_fraction))
        counts = {SPEECH: n_speech, NOISE: size - n_speech}
        a0, lab = [], []
        for k in (SPEECH, NOISE):
            src = label_pools[k]
            a0.append(src[rng.integers(0, src.shape[0], counts[k])])
            lab.append(np.full(counts[k], k))
        a0 = np.concatenate(a0)
        labels_b = np.concatenate(lab)
    else:
        idx = rng.integers(0, pool.shape[0], size)
        a0 = pool[idx]
        labels_b = None if labels is None else labels[idx]
    t = rng.uniform(cfg.t_eps, cfg.T, size)
    zeta = complex_normal(rng, size)
    return DsmBatch(a0=a0, t=t, zeta=zeta, labels=labels_b)


def dsm_train(dataset, cfg: DsmTrainConfig, sde: SdeParams, label: int | None = None,
              model: ToyScoreNet | None = None, hidden: int = 32,
              history: list | None = None) -> ToyScoreNet:
    """Fit a ToyScoreNet by plain SGD on the DSM objective.

    ``dataset`` is either a sequence of complex grids (unconditional, or all
    carrying ``label``) or a mapping ``{SPEECH: grids, NOISE: grids}`` for a
    joint conditional model. Per-step losses are appended to ``history``.
    """
    rng = np.random.default_rng(cfg.seed)
    label_pools = None
    if isinstance(dataset, Mapping):
        label_pools = {}
        for k in (SPEECH, NOISE):
            grids = list(dataset.get(k, []))
            if not grids:
                raise ValueError(f"joint training needs data for label {k}")
            label_pools[k] = _pool(grids)
        pool = None
        conditional = True
    else:
        grids = list(dataset)
        if not grids:
            raise ValueError("empty dataset")
        pool = _pool(grids)
        conditional = False
    if model is None:
        model = ToyScoreNet.init(sde, hidden=hidden, conditional=conditional, rng=rng)
    labels = None
    if pool is not None and model.conditional:
        if label is None:
            raise ValueError("conditional model trained on one corpus needs a label")
        labels = np.full(pool.shape[0], int(label))

    for step in range(cfg.steps):
        batch = sample_batch(pool, labels, cfg, rng, label_pools=label_pools)
        loss, grad = model.loss_and_grad(batch)
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"DSM loss diverged at step {step}: loss={loss}, lr={cfg.learning_rate}"
            )
        for k in model.params:
            model.params[k] -= cfg.learning_rate * grad[k]
        if history is not None:
            history.append(loss)
    return model


def _pool(grids) -> np.ndarray:
    shapes = {np.shape(g) for g in grids}
    if len(shapes) != 1:
        raise ValueError(f"dataset grids must share one shape, got {sorted(shapes)}")
    return np.concatenate([np.asarray(g, dtype=complex).reshape(-1) for g in grids])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _real(x):
    return {"shape": list(np.shape(x)), "data": np.asarray(x, dtype=float).reshape(-1).tolist()}


def _cplx(x):
    x = np.asarray(x, dtype=complex)
    return {"shape": list(x.shape), "re": x.real.reshape(-1).tolist(),
            "im": x.imag.reshape(-1).tolist()}


def _unreal(d):
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def _uncplx(d):
    re = np.asarray(d["re"], dtype=float)
    im = np.asarray(d["im"], dtype=float)
    return (re + 1j * im).reshape(d["shape"])


def model_to_json(model: ScoreModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "sde": asdict(model.sde),
        "model": model.to_dict(),
    }
    return json.dumps(doc, sort_keys=True)


def _from_dict(d: dict, sde: SdeParams) -> ScoreModel:
    kind = d["kind"]
    if kind == "gaussian":
        return GaussianScore(_uncplx(d["mean"]), _unreal(d["var"]), sde)
    if kind == "gmm":
        return GmmScore(_unreal(d["weights"]), _uncplx(d["means"]),
                        _unreal(d["variances"]), sde, factorized=d["factorized"])
    if kind == "conditional":
        return ConditionalScore({int(k): _from_dict(v, sde) for k, v in d["models"].items()})
    if kind == "toy_net":
        params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        return ToyScoreNet(params, sde, n_time_freqs=d["n_time_freqs"],
                           conditional=d["conditional"])
    raise ValueError(f"unknown score model kind {kind!r}")


def model_from_json(text: str) -> ScoreModel:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a score model file (format={doc.get('format')!r})")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')}")
    return _from_dict(doc["model"], SdeParams(**doc["sde"]))


def save_model(model: ScoreModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(model_to_json(model))


def load_model(path) -> ScoreModel:
    with open(path, encoding="utf-8") as f:
        return model_from_json(f.read())
