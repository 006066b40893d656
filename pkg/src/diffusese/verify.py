"""Oracle-based verification suites.

Each ``check_*`` function runs one self-contained experiment against an
independent oracle (closed forms, numerical integration, finite differences,
synthetic ground truth) and returns a :class:`CheckResult`. ``SUITES`` maps
the CLI suite names onto them.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from . import metrics, nmf, synthetic
from .enhancers import EnhanceConfig, enhance, noise_posterior
from .sampler import SamplerConfig, prior_sample
from .score import (
    SPEECH,
    NOISE,
    ConditionalScore,
    DsmBatch,
    GaussianScore,
    ToyScoreNet,
)
from .sde import SdeParams, complex_normal, make_schedule, tweedie, tweedie_denoise
from .spectral import StftConfig, istft, stft, wiener_postfilter


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float = math.inf
    values: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.passed and self.seconds <= self.budget

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        timing = f"{self.seconds:.2f}s/{self.budget:g}s"
        return f"[{tag}] {self.name}: {self.detail} ({timing})"


def _timed(name: str, budget: float, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail, values = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0, budget, values)


def _max_z(samples: np.ndarray, target: np.ndarray) -> float:
    """Largest |mean - target| / SE over real and imaginary parts of every bin."""
    n = samples.shape[0]
    z = []
    for part in (np.real, np.imag):
        s = part(samples)
        se = s.std(axis=0, ddof=1) / math.sqrt(n)
        z.append(np.abs(s.mean(axis=0) - part(target)) / se)
    return float(np.max(z))


# ---------------------------------------------------------------------------
# 1. perturbation kernel
# ---------------------------------------------------------------------------


def rk4_sigma2(params: SdeParams, times, substeps: int = 400) -> np.ndarray:
    """Integrate d(s2)/dt = -2 gamma s2 + g(t)^2 from s2(0) = 0 with classic RK4."""

    def f(t, y):
        return -2.0 * params.gamma * y + float(params.g(t)) ** 2

    out, y, t = [], 0.0, 0.0
    for target in times:
        h = (target - t) / substeps
        for _ in range(substeps):
            k1 = f(t, y)
            k2 = f(t + h / 2, y + h / 2 * k1)
            k3 = f(t + h / 2, y + h / 2 * k2)
            k4 = f(t + h, y + h * k3)
            y += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out.append(y)
    return np.array(out)


def _perturbation_kernel(params: SdeParams, N: int, tol: float):
    sched = make_schedule(params, N)
    ref = rk4_sigma2(params, sched.tau)
    err = float(np.max(np.abs(sched.sigma**2 - ref) / ref))
    return err < tol, f"max rel err {err:.2e} over {N} grid points (tol {tol:g})", {"max_rel_err": err}


def check_perturbation_kernel(params: SdeParams = SdeParams(), N: int = 30,
                              tol: float = 1e-6) -> CheckResult:
    return _timed("perturbation kernel", 1.0, _perturbation_kernel, params, N, tol)


# ---------------------------------------------------------------------------
# 2. Tweedie
# ---------------------------------------------------------------------------


def _tweedie(cases: int, seed: int, tol: float):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        delta = rng.uniform(0.05, 1.0)
        s2 = rng.uniform(1e-4, 1.0)
        mu = complex(rng.normal(), rng.normal())
        var = rng.uniform(0.01, 2.0)
        a = complex(rng.normal(), rng.normal()) * math.sqrt(delta**2 * var + s2) + delta * mu
        score = -(a - delta * mu) / (delta**2 * var + s2)
        got = tweedie(a, score, delta, s2)
        # conjugate-Gaussian posterior mean: precision-weighted combination
        prec = 1.0 / var + delta**2 / s2
        want = (mu / var + delta * a / s2) / prec
        worst = max(worst, abs(got - want) / abs(want))
    # the same identity through the schedule and an analytic score model
    params = SdeParams()
    sched = make_schedule(params, 30)
    model = GaussianScore(0.3 - 0.2j, 0.7, params)
    a = complex_normal(rng, (8,))
    for i in (1, 15, 30):
        got = tweedie_denoise(a, model(a, sched.tau_at(i)), sched, i)
        want = model.posterior_mean(a, sched.tau_at(i))
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    return worst < tol, f"max rel err {worst:.2e} on {cases} cases (tol {tol:g})", {"max_rel_err": worst}


def check_tweedie(cases: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    return _timed("Tweedie exactness", 1.0, _tweedie, cases, seed, tol)


# ---------------------------------------------------------------------------
# 3. prior sampler
# ---------------------------------------------------------------------------


def _prior_sampler(runs: int, seed: int, N: int):
    rng = np.random.default_rng(seed)
    params = SdeParams()
    var = rng.uniform(0.05, 0.5, (4, 4))
    mean = 0.5 * np.sqrt(var) * np.exp(2j * np.pi * rng.uniform(size=(4, 4)))
    model = GaussianScore(mean, var, params)
    cfg = SamplerConfig(make_schedule(params, N))
    samples = prior_sample(model, (runs, 4, 4), cfg, rng)
    z = _max_z(samples, mean)
    ratio = np.mean(np.abs(samples - samples.mean(axis=0)) ** 2, axis=0) / var
    dev = float(np.max(np.abs(ratio - 1.0)))
    ok = z < 5.0 and dev < 0.10
    return ok, (f"max |mean err|/SE = {z:.2f} (< 5), max |var ratio - 1| = {dev:.3f} (< 0.10)"
                f" over {runs} runs"), {"max_z": z, "max_var_dev": dev}


def check_prior_sampler(runs: int = 2000, seed: int = 0, N: int = 30) -> CheckResult:
    return _timed("prior sampler fidelity", 120.0, _prior_sampler, runs, seed, N)


# ---------------------------------------------------------------------------
# 4. conjugate toy
# ---------------------------------------------------------------------------


def conjugate_toy(seed: int = 1, shape=(4, 4), low: float = 0.5, high: float = 2.0):
    """Gaussian speech and noise priors with a mixture drawn from the model.

    Returns ``(x, speech_var, noise_var, mmse)``.
    """
    rng = np.random.default_rng(seed)
    vs = rng.uniform(low, high, shape)
    vn = rng.uniform(low, high, shape)
    x = np.sqrt(vs) * complex_normal(rng, shape) + np.sqrt(vn) * complex_normal(rng, shape)
    return x, vs, vn, vs / (vs + vn) * x


def conjugate_runs(algorithm: str, runs: int = 200, seed: int = 1, run_seed: int = 0,
                   **overrides) -> dict:
    """Run ``algorithm`` ``runs`` times on the conjugate toy (batched along a leading axis).

    Returns the stacked speech estimates (pre-filter for the joint model),
    noise estimates and the MMSE target.
    """
    params = SdeParams()
    x, vs, vn, mmse = conjugate_toy(seed)
    xb = np.broadcast_to(x, (runs,) + x.shape).copy()
    cfg = EnhanceConfig(algorithm=algorithm, m_step=False, seed=run_seed, **overrides)
    speech = GaussianScore(0.0, vs, params)
    if algorithm.startswith("paradiffuse"):
        joint = ConditionalScore({SPEECH: speech, NOISE: GaussianScore(0.0, vn, params)})
        res = enhance(xb, joint, cfg)
    else:
        res = enhance(xb, speech, cfg, noise_var=vn)
    s = res.speech_prefilter if res.speech_prefilter is not None else res.speech
    n = res.noise_prefilter if res.noise_prefilter is not None else res.noise
    return {"x": x, "mmse": mmse, "speech": s, "noise": n, "result": res}


def _conjugate(algorithms, runs: int, seed: int):
    parts, values, ok = [], {}, True
    for alg in algorithms:
        out = conjugate_runs(alg, runs, seed)
        z = _max_z(out["speech"], out["mmse"])
        values[alg] = z
        ok &= z < 5.0
        parts.append(f"{alg} max |mean - MMSE|/SE = {z:.2f}")
    return ok, "; ".join(parts) + f" (< 5, {runs} runs)", values


def check_conjugate(runs: int = 200, seed: int = 1,
                    algorithms=("diffuseen", "paradiffuse-en")) -> CheckResult:
    return _timed("conjugate-toy posterior", 300.0, _conjugate, algorithms, runs, seed)


# ---------------------------------------------------------------------------
# 5. NMF monotonicity
# ---------------------------------------------------------------------------


def _nmf(seeds: int, updates: int, slack: float, exponent: float):
    violations, worst = 0, 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        V = rng.gamma(1.0, 1.0, (20, 30))
        params = nmf.init_params(V, 4, rng)
        prev = nmf.is_divergence(V, params)
        for _ in range(updates):
            params = nmf.mu_update(V, params, exponent)
            cur = nmf.is_divergence(V, params)
            worst = max(worst, cur - prev)
            violations += cur > prev + slack
            prev = cur
    return violations == 0, (f"{violations} violations in {seeds} seeds x {updates} updates, "
                             f"largest increase {worst:.1e}"), {"violations": violations}


def check_nmf(seeds: int = 100, updates: int = 200, slack: float = 1e-12,
              exponent: float = 0.5) -> CheckResult:
    return _timed("NMF monotonicity", 30.0, _nmf, seeds, updates, slack, exponent)


# ---------------------------------------------------------------------------
# 6. noise posterior
# ---------------------------------------------------------------------------


def integrate_posterior_1d(d: float, sr2: float, v: float) -> tuple[float, float]:
    """Mean and variance of p(n) ~ N(d; n, sr2/2) N(n; 0, v/2) on the real line by quadrature."""

    def dens(n):
        return math.exp(-((d - n) ** 2) / sr2 - n * n / v)

    span = abs(d) + 40.0 * math.sqrt(max(sr2, v))
    kw = dict(points=[0.0, d], limit=500, epsabs=0.0, epsrel=1e-11)
    z = integrate.quad(dens, -span, span, **kw)[0]
    m = integrate.quad(lambda n: n * dens(n), -span, span, **kw)[0] / z
    var = integrate.quad(lambda n: (n - m) ** 2 * dens(n), -span, span, **kw)[0] / z
    return m, var


def _noise_posterior(cases: int, seed: int, tol: float, id_tol: float):
    rng = np.random.default_rng(seed)
    worst, worst_id = 0.0, 0.0
    for _ in range(cases):
        sr2 = rng.uniform(0.01, 1.0)
        v = rng.uniform(0.01, 10.0)
        x = complex(rng.normal(), rng.normal()) * 2
        s = complex(rng.normal(), rng.normal())
        post = noise_posterior(np.array([x]), np.array([s]), np.array([v]), sr2)
        d = x - s
        mr, vr = integrate_posterior_1d(d.real, sr2, v)
        mi, vi = integrate_posterior_1d(d.imag, sr2, v)
        mu, Sigma = post.mu_n[0], post.Sigma_n[0]
        worst = max(worst, abs(mu - complex(mr, mi)) / abs(complex(mr, mi)),
                    abs(Sigma - (vr + vi)) / (vr + vi))
        worst_id = max(worst_id, abs(1.0 / Sigma - (1.0 / sr2 + 1.0 / v)) * Sigma)
    ok = worst < tol and worst_id < id_tol
    return ok, (f"max rel err vs quadrature {worst:.2e} (tol {tol:g}), "
                f"precision identity {worst_id:.1e} (tol {id_tol:g})"), \
        {"max_rel_err": worst, "identity_err": worst_id}


def check_noise_posterior(cases: int = 50, seed: int = 0, tol: float = 1e-6,
                          id_tol: float = 1e-12) -> CheckResult:
    return _timed("noise-posterior conjugacy", 5.0, _noise_posterior, cases, seed, tol, id_tol)


# ---------------------------------------------------------------------------
# 7. Wiener identity
# ---------------------------------------------------------------------------


def _wiener(seed: int, tol: float):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in ((256, 63), (4, 4), (1, 7)):
        s0, n0, x = (complex_normal(rng, shape) * rng.uniform(0.01, 3.0) for _ in range(3))
        s, n = wiener_postfilter(s0, n0, x)
        err = np.abs(np.abs(s) ** 2 + np.abs(n) ** 2 - np.abs(x) ** 2) / np.abs(x) ** 2
        worst = max(worst, float(err.max()))
    return worst < tol, f"max rel err {worst:.1e} (tol {tol:g})", {"max_rel_err": worst}


def check_wiener(seed: int = 0, tol: float = 1e-9) -> CheckResult:
    return _timed("Wiener identity", 1.0, _wiener, seed, tol)


# ---------------------------------------------------------------------------
# 8. metrics
# ---------------------------------------------------------------------------


def _metrics(seed: int):
    rng = np.random.default_rng(seed)
    s, n = rng.standard_normal(1000), rng.standard_normal(1000)
    est = 0.8 * s + 0.3 * n + 0.1 * rng.standard_normal(1000)
    base = metrics.si_sdr(est, s)
    drift = max(abs(metrics.si_sdr(a * est, s) - base) for a in (0.1, 3.0, -2.0))
    t, i, a = metrics.projections(est, s, n)
    energy = abs(est @ est - (t @ t + i @ i + a @ a)) / (est @ est)
    path = abs(metrics.si_decomposition(est, s, n).si_sdr - base)
    hand = (metrics.si_sdr([1.0, 1.0], [1.0, 0.0]) == 0.0
            and metrics.si_sdr([2.0, 0.0], [1.0, 0.0]) == math.inf
            and metrics.si_decomposition([1.0, 1.0], [1.0, 0.0], [0.0, 1.0])
            == metrics.SeparationScores(0.0, 0.0, math.inf)
            and metrics.mixture_consistency(np.ones(4), 0.5 * np.ones(4), np.zeros(4)) == 0.5)
    ok = drift < 1e-9 and energy < 1e-9 and path < 1e-9 and hand
    return ok, (f"scale drift {drift:.1e} dB, energy identity {energy:.1e}, "
                f"decomposition path {path:.1e} dB, hand examples {'ok' if hand else 'WRONG'}"), \
        {"drift": drift, "energy": energy}


def check_metrics(seed: int = 0) -> CheckResult:
    return _timed("metric invariances", 1.0, _metrics, seed)


# ---------------------------------------------------------------------------
# 9. DSM gradient
# ---------------------------------------------------------------------------


def finite_difference_grad(model: ToyScoreNet, batch: DsmBatch, eps: float = 1e-6) -> dict:
    grads = {}
    for name, arr in model.params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = model.loss_and_grad(batch, need_grad=False)[0]
            flat[j] = old - eps
            down = model.loss_and_grad(batch, need_grad=False)[0]
            flat[j] = old
            g.reshape(-1)[j] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def random_net(rng: np.random.Generator, conditional: bool = True, hidden: int = 8) -> ToyScoreNet:
    """Toy network with every parameter (FiLM included) set to random values."""
    net = ToyScoreNet.init(SdeParams(), hidden=hidden, conditional=conditional, rng=rng)
    for k in ("film1_scale", "film1_shift", "film2_scale", "film2_shift"):
        net.params[k] = 0.3 * rng.standard_normal(net.params[k].shape)
    return net


def random_batch(rng: np.random.Generator, size: int = 16, conditional: bool = True) -> DsmBatch:
    return DsmBatch(
        a0=complex_normal(rng, size) * 0.7,
        t=rng.uniform(0.03, 1.0, size),
        zeta=complex_normal(rng, size),
        labels=rng.integers(0, 2, size) if conditional else None,
    )


def _dsm_gradient(batches: int, seed: int, tol: float):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(batches):
        net = random_net(rng)
        batch = random_batch(rng)
        _, g = net.loss_and_grad(batch)
        fd = finite_difference_grad(net, batch)
        for k in g:
            err = np.linalg.norm(g[k] - fd[k]) / max(np.linalg.norm(fd[k]), 1e-12)
            worst = max(worst, float(err))
    return worst < tol, f"max per-parameter rel err {worst:.1e} on {batches} batches (tol {tol:g})", \
        {"max_rel_err": worst}


def check_dsm_gradient(batches: int = 5, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    return _timed("DSM gradient", 10.0, _dsm_gradient, batches, seed, tol)


# ---------------------------------------------------------------------------
# 10. explicit vs implicit consistency on synthetic mixtures
# ---------------------------------------------------------------------------


def synthetic_setup(seed: int = 0, n_samples: int = 8000, cfg: StftConfig = StftConfig()):
    """GMM speech prior, a fixed noise template and the joint (speech, noise) prior."""
    params = SdeParams()
    speech = synthetic.speech_gmm_prior(cfg.n_freq, params)
    w0, _ = synthetic.rank1_noise(cfg.n_freq, 8, np.random.default_rng(seed))
    joint = ConditionalScore({SPEECH: speech, NOISE: synthetic.noise_gaussian_prior(w0, params)})
    return speech, joint, w0


def evaluate_mixtures(mixtures: int = 20, seed: int = 0, n_samples: int = 8000,
                      algorithms=None) -> dict:
    """SI-SDR improvements and mixture residuals of every algorithm on synthetic mixtures."""
    from .enhancers import ALGORITHMS

    algorithms = ALGORITHMS if algorithms is None else algorithms
    cfg = StftConfig()
    speech, joint, w0 = synthetic_setup(seed, n_samples, cfg)
    gains = {a: [] for a in algorithms}
    residual = {a: [] for a in algorithms}
    for k in range(mixtures):
        mix = synthetic.make_mixture(np.random.default_rng(1000 * (seed + 1) + k), n_samples,
                                     cfg, speech, noise_w=w0, snr=0.0)
        X = stft(mix.mixture, cfg)
        base = metrics.si_sdr(mix.mixture, mix.speech)
        for alg in algorithms:
            model = joint if alg.startswith("paradiffuse") else speech
            res = enhance(X, model, EnhanceConfig(algorithm=alg, seed=k))
            y = istft(res.speech, cfg, n_samples)
            gains[alg].append(metrics.si_sdr(y, mix.speech) - base)
            residual[alg].append(metrics.mixture_consistency(X, res.speech, res.noise))
    return {"gains": gains, "residual": residual}


def _consistency(mixtures: int, seed: int):
    out = evaluate_mixtures(mixtures, seed)
    rd = np.array(out["residual"]["diffuseen"])
    ru = np.array(out["residual"]["udiffse+"])
    wins = int(np.sum(rd < ru))
    need = math.ceil(0.8 * mixtures)
    medians = {a: float(np.median(g)) for a, g in out["gains"].items()}
    ok_wins = wins >= need
    ok_gain = all(m > 0 for m in medians.values())
    med = ", ".join(f"{a} {m:+.2f}" for a, m in medians.items())
    detail = (f"DiffUSEEN residual below UDiffSE+ in {wins}/{mixtures} (need {need}); "
              f"median SI-SDR gain dB: {med} (all > 0 needed)")
    return ok_wins and ok_gain, detail, {"wins": wins, "medians": medians,
                                         "ok_wins": ok_wins, "ok_gain": ok_gain}


def check_consistency(mixtures: int = 20, seed: int = 0) -> CheckResult:
    return _timed("explicit-vs-implicit consistency", 900.0, _consistency, mixtures, seed)


# ---------------------------------------------------------------------------
# 11. STFT round trip
# ---------------------------------------------------------------------------


def _stft_roundtrip(seed: int, tol: float):
    cfg = StftConfig()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (16000, 16000 + 77, 510):
        x = rng.standard_normal(n)
        worst = max(worst, float(np.max(np.abs(istft(stft(x, cfg), cfg, n) - x))))
    return worst < tol, f"max abs err {worst:.1e} (tol {tol:g})", {"max_abs_err": worst}


def check_stft(seed: int = 0, tol: float = 1e-6) -> CheckResult:
    return _timed("STFT round trip", 1.0, _stft_roundtrip, seed, tol)


# ---------------------------------------------------------------------------
# 12. determinism
# ---------------------------------------------------------------------------


def _determinism(seed: int):
    from . import cli
    from .score import save_model
    from .spectral import write_wav

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = StftConfig()
        speech, joint, w0 = synthetic_setup(seed)
        mix = synthetic.make_mixture(np.random.default_rng(seed), 8000, cfg, speech, noise_w=w0)
        peak = np.max(np.abs(mix.mixture))
        write_wav(tmp / "in.wav", 0.5 * mix.mixture / peak)
        save_model(joint, tmp / "joint.json")
        outputs = []
        for rep in range(2):
            out = tmp / f"run{rep}"
            code = cli.main(["enhance", "--alg", "paradiffuse-en", "--model", str(tmp / "joint.json"),
                             "--seed", str(seed), "--steps", "10", str(tmp / "in.wav"),
                             str(out / "out.wav"), "--quiet"])
            if code != 0:
                return False, f"enhance exited with {code}", {}
            files = sorted(p for p in out.iterdir() if p.suffix == ".wav")
            report = cli.strip_volatile(cli.read_json(out / "out.json"))
            outputs.append(([p.name for p in files], [p.read_bytes() for p in files], report))
        same_wavs = outputs[0][:2] == outputs[1][:2]
        same_report = outputs[0][2] == outputs[1][2]
    ok = same_wavs and same_report
    return ok, (f"WAV outputs {'identical' if same_wavs else 'DIFFER'}, "
                f"reports {'identical' if same_report else 'DIFFER'} (wall-clock fields excluded)"), {}


def check_determinism(seed: int = 0) -> CheckResult:
    return _timed("determinism", 60.0, _determinism, seed)


SUITES = {
    "kernel": check_perturbation_kernel,
    "tweedie": check_tweedie,
    "prior": check_prior_sampler,
    "conjugate": check_conjugate,
    "nmf": check_nmf,
    "posterior": check_noise_posterior,
    "wiener": check_wiener,
    "metrics": check_metrics,
    "dsm": check_dsm_gradient,
    "consistency": check_consistency,
    "stft": check_stft,
    "determinism": check_determinism,
}


def run_all(names=None) -> list[CheckResult]:
    names = list(SUITES) if names is None else names
    return [SUITES[n]() for n in names]
