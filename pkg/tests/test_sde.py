import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusese.score import GaussianScore, GmmScore
from diffusese.sde import (
    SdeParams,
    complex_normal,
    make_schedule,
    perturb,
    tweedie,
    tweedie_denoise,
)
from diffusese.verify import rk4_sigma2


class TestParams:
    @pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(sigma_min=0.6), dict(T=0.0),
                                    dict(sigma_min=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SdeParams(**kw)

    def test_sigma_zero_at_origin_and_monotone(self, sde):
        t = np.linspace(0, 1, 201)
        s2 = sde.sigma2(t)
        assert s2[0] == 0.0
        assert np.all(np.diff(s2) > 0)


class TestSchedule:
    def test_default_step_count(self, sde):
        sched = make_schedule(sde, 30)
        assert len(sched.tau) == 30 and sched.tau_at(30) == pytest.approx(sde.T)
        assert sched.dtau == pytest.approx(1 / 30)

    def test_terminal_delta(self):
        p = SdeParams(gamma=2.7)
        assert make_schedule(p, 10).delta_at(10) == pytest.approx(math.exp(-2.7), rel=1e-15)

    def test_invariants(self, sde):
        sched = make_schedule(sde, 50)
        assert np.all((sched.delta > 0) & (sched.delta <= 1))
        assert np.all(np.diff(sched.delta) < 0)
        assert np.all(np.diff(sched.sigma) > 0)
        assert np.all(sched.g > 0)

    def test_variance_matches_ode(self, sde):
        sched = make_schedule(sde, 30)
        ref = rk4_sigma2(sde, sched.tau)
        assert np.max(np.abs(sched.sigma**2 - ref) / ref) < 1e-6

    def test_zero_steps_rejected(self, sde):
        with pytest.raises(ValueError):
            make_schedule(sde, 0)

    def test_index_bounds(self, sde):
        sched = make_schedule(sde, 5)
        with pytest.raises(IndexError):
            sched.sigma_at(0)
        with pytest.raises(IndexError):
            sched.delta_at(6)

    def test_csv_dump(self, sde):
        lines = make_schedule(sde, 4).to_csv().strip().splitlines()
        assert lines[0] == "i,tau,delta,sigma,g" and len(lines) == 5

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 5.0), st.floats(0.01, 0.2), st.floats(1.5, 20.0))
    def test_ode_oracle_any_params(self, gamma, smin, ratio):
        p = SdeParams(gamma=gamma, sigma_min=smin, sigma_max=smin * ratio)
        sched = make_schedule(p, 8)
        ref = rk4_sigma2(p, sched.tau)
        assert np.max(np.abs(sched.sigma**2 - ref) / ref) < 1e-6


class TestComplexNormal:
    def test_unit_total_variance(self, rng):
        z = complex_normal(rng, 200_000)
        assert np.var(z.real) == pytest.approx(0.5, rel=0.02)
        assert np.var(z.imag) == pytest.approx(0.5, rel=0.02)
        assert abs(np.mean(z.real * z.imag)) < 0.01


class TestPerturb:
    def test_noiseless_kernel(self, sde, rng):
        sched = make_schedule(sde, 10)
        zero = type(sched)(params=sde, N=10, tau=sched.tau, delta=sched.delta,
                           sigma=np.zeros(10), g=sched.g, dtau=sched.dtau)
        a0 = np.array([1 + 2j, -0.5j])
        assert np.array_equal(perturb(a0, zero, 4, rng), sched.delta_at(4) * a0)

    def test_moments(self, sde, rng):
        sched = make_schedule(sde, 30)
        a0 = np.array([1.0 + 0.5j, -2.0j, 0.3])
        i = 17
        draws = perturb(np.broadcast_to(a0, (10_000, 3)), sched, i, rng)
        n = draws.shape[0]
        mean = draws.mean(axis=0)
        for part in (np.real, np.imag):
            se = part(draws).std(axis=0, ddof=1) / math.sqrt(n)
            assert np.all(np.abs(part(mean) - part(sched.delta_at(i) * a0)) < 5 * se)
        var = np.mean(np.abs(draws - mean) ** 2, axis=0)
        # the per-bin variance estimate of |.|^2 has SE ~ sigma^2 / sqrt(n)
        assert np.all(np.abs(var - sched.sigma_at(i) ** 2) < 5 * sched.sigma_at(i) ** 2 / math.sqrt(n))

    def test_gaussian_marginal(self, sde, rng):
        sched = make_schedule(sde, 30)
        mu, var, i = 1.0 - 1.0j, 2.0, 25
        a0 = mu + math.sqrt(var) * complex_normal(rng, 20_000)
        at = perturb(a0, sched, i, rng)
        d, s2 = sched.delta_at(i), sched.sigma_at(i) ** 2
        se = math.sqrt((d * d * var + s2) / 2 / at.size)
        assert abs(at.mean().real - d * mu.real) < 5 * se
        assert abs(at.mean().imag - d * mu.imag) < 5 * se
        assert np.var(at) == pytest.approx(d * d * var + s2, rel=0.05)


class TestTweedie:
    def test_scalar_gaussian_example(self):
        a = np.array([0.7 - 0.2j])
        out = tweedie(a, -a / (0.8**2 + 0.6**2), 0.8, 0.36)
        assert np.allclose(out, 0.8 * a, rtol=1e-14)

    def test_zero_score(self, sde):
        sched = make_schedule(sde, 30)
        a = np.array([1.0 + 1.0j])
        assert np.allclose(tweedie_denoise(a, np.zeros(1), sched, 3), a / sched.delta_at(3))

    def test_delta_underflow_rejected(self):
        with pytest.raises(FloatingPointError):
            tweedie(np.ones(1), np.zeros(1), 1e-300, 1.0)

    def test_shape_mismatch(self, sde):
        with pytest.raises(ValueError):
            tweedie_denoise(np.ones(3), np.zeros(2), make_schedule(sde, 5), 1)

    def test_gmm_posterior_mean(self, sde):
        sched = make_schedule(sde, 30)
        gmm = GmmScore([0.3, 0.7], np.array([[-1.0], [2.0]]), np.array([[0.2], [0.5]]), sde)
        a = np.linspace(-2, 3, 11).astype(complex) + 0.3j
        for i in (1, 10, 30):
            t = sched.tau_at(i)
            out = tweedie_denoise(a, gmm(a, t), sched, i)
            assert np.allclose(out, gmm.posterior_mean(a, t), rtol=1e-10, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.05, 1.0), st.floats(1e-4, 1.0), st.floats(-3, 3), st.floats(0.01, 3.0),
           st.floats(-4, 4))
    def test_gaussian_conditional_mean(self, delta, s2, mu, var, a):
        score = -(a - delta * mu) / (delta**2 * var + s2)
        exact = mu + delta * var / (delta**2 * var + s2) * (a - delta * mu)
        out = tweedie(np.array([a + 0j]), np.array([score]), delta, s2)[0]
        assert abs(out - exact) <= 1e-10 * max(abs(exact), 1e-3)

    def test_gaussian_prior_every_step(self, sde, rng):
        sched = make_schedule(sde, 30)
        prior = GaussianScore(0.4 - 0.1j, 1.3, sde)
        a = complex_normal(rng, 8)
        for i in range(1, 31):
            t = sched.tau_at(i)
            assert np.allclose(tweedie_denoise(a, prior(a, t), sched, i),
                               prior.posterior_mean(a, t), rtol=1e-10)
