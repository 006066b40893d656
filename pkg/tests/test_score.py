import math

import numpy as np
import pytest
from scipy import integrate

from diffusese.score import (
    NOISE,
    SPEECH,
    ConditionalScore,
    DsmBatch,
    DsmTrainConfig,
    GaussianScore,
    GmmScore,
    ToyScoreNet,
    dsm_loss,
    dsm_loss_gradient,
    dsm_train,
    load_model,
    model_from_json,
    model_to_json,
    save_model,
    score,
)
from diffusese.sde import SdeParams, complex_normal
from diffusese.verify import finite_difference_grad, random_batch, random_net


def fd_score(model, a, t, h=1e-5):
    """Central differences of the log-density; complex score = d/dRe + i d/dIm."""
    out = np.zeros_like(a)
    for j in range(a.size):
        grad = []
        for step in (h, 1j * h):
            up, down = a.copy(), a.copy()
            up.flat[j] += step
            down.flat[j] -= step
            grad.append((model.log_density(up, t) - model.log_density(down, t)) / (2 * h))
        # log-density of N_C has d/dRe = -2 Re(a - m) / v, so halve to match the score convention
        out.flat[j] = 0.5 * (grad[0] + 1j * grad[1])
    return out


def weighted_rel_l2(model, ref, sde, taus=np.linspace(0.1, 1.0, 10)):
    """Relative L2 of ``sigma(t) S`` (the quantity the DSM objective regresses) on an (a, t) grid."""
    num = den = 0.0
    for t in taus:
        m, v = ref.marginal(t)
        offsets = np.linspace(-2, 2, 9)[:, None] * np.array([1, 1j, (1 + 1j) / math.sqrt(2)])
        a = m + math.sqrt(float(np.max(v))) * offsets
        w = float(sde.sigma2(t))
        num += w * np.sum(np.abs(model(a, t) - ref(a, t)) ** 2)
        den += w * np.sum(np.abs(ref(a, t)) ** 2)
    return math.sqrt(num / den)


def gaussian_grids(mean, var, rng, count=20, shape=(16, 16)):
    return [mean + math.sqrt(var) * complex_normal(rng, shape) for _ in range(count)]


class TestAnalyticScores:
    def test_gaussian_closed_form(self, sde, rng):
        prior = GaussianScore(0.3 - 0.4j, np.array([0.5, 2.0]), sde)
        a = complex_normal(rng, 2)
        t = 0.4
        d, s2 = float(sde.delta(t)), float(sde.sigma2(t))
        expected = -(a - d * prior.mean) / (d * d * prior.var + s2)
        assert np.allclose(prior(a, t), expected, rtol=1e-14)

    def test_gaussian_finite_differences(self, sde, rng):
        prior = GaussianScore(complex_normal(rng, 5), rng.uniform(0.2, 2, 5), sde)
        a = complex_normal(rng, 5)
        for t in (0.05, 0.5, 1.0):
            fd = fd_score(prior, a, t)
            assert np.max(np.abs(prior(a, t) - fd) / np.abs(fd)) < 1e-6

    def test_zero_at_mode(self, sde):
        prior = GaussianScore(1.0 + 2.0j, 0.7, sde)
        t = 0.6
        assert np.allclose(prior(np.array([float(sde.delta(t)) * (1 + 2j)]), t), 0.0, atol=1e-15)

    def test_gmm_finite_differences(self, sde, rng):
        gmm = GmmScore([0.2, 0.5, 0.3], complex_normal(rng, (3, 4)), rng.uniform(0.1, 1.0, (3, 4)), sde)
        a = 1.5 * complex_normal(rng, 4)
        for t in (0.05, 0.3, 1.0):
            fd = fd_score(gmm, a, t)
            assert np.max(np.abs(gmm(a, t) - fd) / np.abs(fd)) < 1e-6

    def test_joint_gmm_finite_differences(self, sde, rng):
        gmm = GmmScore([0.4, 0.6], complex_normal(rng, (2, 3)), rng.uniform(0.2, 1.0, (2, 3)), sde,
                       factorized=False)
        a = complex_normal(rng, 3)
        fd = fd_score(gmm, a, 0.3)
        assert np.max(np.abs(gmm(a, 0.3) - fd) / np.abs(fd)) < 1e-6

    def test_score_integrates_to_density_ratio(self, sde):
        gmm = GmmScore([0.3, 0.7], np.array([[-1.0], [1.5]]), np.array([[0.3], [0.6]]), sde)
        t, a0, a1 = 0.2, -2.0, 2.5
        # integrate the real-axis derivative 2 Re S along Re a at fixed Im a = 0
        val = integrate.quad(lambda u: 2 * gmm(np.array([u + 0j]), t)[0].real, a0, a1,
                             epsabs=0, epsrel=1e-12, limit=200)[0]
        ratio = math.exp(gmm.log_density(np.array([a1 + 0j]), t)
                         - gmm.log_density(np.array([a0 + 0j]), t))
        assert math.exp(val) == pytest.approx(ratio, rel=1e-4)

    def test_invalid_priors(self, sde):
        with pytest.raises(ValueError):
            GaussianScore(0.0, 0.0, sde)
        with pytest.raises(ValueError):
            GmmScore([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1)), sde)


class TestQueries:
    def test_nonpositive_time(self, sde):
        with pytest.raises(ValueError, match="time"):
            score(GaussianScore(0.0, 1.0, sde), np.zeros(2), 0.0)

    def test_conditional_needs_label(self, sde):
        joint = ConditionalScore({SPEECH: GaussianScore(0.0, 1.0, sde),
                                  NOISE: GaussianScore(0.0, 2.0, sde)})
        with pytest.raises(ValueError, match="label"):
            joint(np.zeros(2), 0.5)
        assert np.allclose(joint(np.ones(2), 0.5, NOISE), GaussianScore(0.0, 2.0, sde)(np.ones(2), 0.5))

    def test_shape_preserved(self, sde):
        prior = GaussianScore(0.0, np.ones((3, 1)), sde)
        assert prior(np.zeros((3, 5)), 0.5).shape == (3, 5)


class TestDsmGradient:
    def test_quadratic_single_parameter(self, rng):
        # only the output bias is free, so the loss is an exact quadratic in it
        net = ToyScoreNet.init(SdeParams(), hidden=4, rng=rng)
        batch = random_batch(rng, size=32, conditional=False)
        g = dsm_loss_gradient(net, batch)["b2"]
        fd = finite_difference_grad(net, batch, eps=1e-3)["b2"]
        assert np.allclose(g, fd, rtol=1e-8, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_all_parameters(self, seed):
        rng = np.random.default_rng(seed)
        net = random_net(rng)
        batch = random_batch(rng)
        g = dsm_loss_gradient(net, batch)
        fd = finite_difference_grad(net, batch)
        for k in g:
            assert np.linalg.norm(g[k] - fd[k]) <= 1e-4 * max(np.linalg.norm(fd[k]), 1e-12), k

    def test_directional_derivatives(self, rng):
        net = random_net(rng)
        batch = random_batch(rng)
        g = dsm_loss_gradient(net, batch)
        base = {k: v.copy() for k, v in net.params.items()}
        for _ in range(5):
            direction = {k: rng.standard_normal(v.shape) for k, v in base.items()}
            vals = []
            for eps in (1e-5, -1e-5):
                for k in base:
                    net.params[k] = base[k] + eps * direction[k]
                vals.append(dsm_loss(net, batch))
            fd = (vals[0] - vals[1]) / 2e-5
            an = sum(float(np.sum(g[k] * direction[k])) for k in base)
            assert abs(an - fd) <= 1e-4 * abs(fd)
        net.params.update(base)

    def test_empty_batch(self, rng):
        net = ToyScoreNet.init(SdeParams(), hidden=4, rng=rng)
        empty = DsmBatch(np.zeros(0, complex), np.zeros(0), np.zeros(0, complex))
        with pytest.raises(ValueError):
            dsm_loss_gradient(net, empty)


class TestDsmTraining:
    def test_zero_model_loss_is_one(self, sde, rng):
        net = ToyScoreNet.init(sde, hidden=4, zero=True)
        batch = DsmBatch(complex_normal(rng, 100_000), rng.uniform(0.03, 1, 100_000),
                         complex_normal(rng, 100_000))
        assert dsm_loss(net, batch) == pytest.approx(1.0, abs=0.02)

    def test_learns_gaussian_score(self, sde):
        rng = np.random.default_rng(0)
        mean, var = 0.5 + 0.2j, 0.6
        model = dsm_train(gaussian_grids(mean, var, rng), DsmTrainConfig(steps=20_000, learning_rate=0.02, seed=0), sde)
        assert weighted_rel_l2(model, GaussianScore(mean, var, sde), sde) < 0.10

    def test_heldout_loss_improves(self, sde):
        rng = np.random.default_rng(1)
        grids = gaussian_grids(0.0, 0.4, rng)
        held = DsmBatch(0.4**0.5 * complex_normal(rng, 20_000), rng.uniform(0.03, 1, 20_000),
                        complex_normal(rng, 20_000))
        before = ToyScoreNet.init(sde, rng=np.random.default_rng(1))
        loss0 = dsm_loss(before, held)
        after = dsm_train(grids, DsmTrainConfig(steps=1500, seed=1), sde)
        zero = dsm_loss(ToyScoreNet.init(sde, zero=True), held)
        assert dsm_loss(after, held) < min(loss0, zero)

    def test_deterministic(self, sde):
        grids = gaussian_grids(0.0, 1.0, np.random.default_rng(2), count=3)
        cfg = DsmTrainConfig(steps=200, seed=7)
        a, b = dsm_train(grids, cfg, sde), dsm_train(grids, cfg, sde)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_conditional_separation(self, sde):
        rng = np.random.default_rng(3)
        priors = {SPEECH: GaussianScore(1.0, 0.3, sde), NOISE: GaussianScore(-1.0 + 0.5j, 1.0, sde)}
        data = {SPEECH: gaussian_grids(1.0, 0.3, rng), NOISE: gaussian_grids(-1.0 + 0.5j, 1.0, rng)}
        model = dsm_train(data, DsmTrainConfig(steps=3000, seed=3), sde)
        for label, other in ((SPEECH, NOISE), (NOISE, SPEECH)):
            for t in (0.2, 0.5, 0.9):
                # probe where the label's own training data lives at time t
                m, v = priors[label].marginal(t)
                a = m + math.sqrt(v) * complex_normal(rng, 400)
                est = model(a, t, label)
                assert np.linalg.norm(est - priors[label](a, t)) < np.linalg.norm(est - priors[other](a, t))

    def test_empty_dataset(self, sde):
        with pytest.raises(ValueError, match="empty"):
            dsm_train([], DsmTrainConfig(steps=1), sde)

    def test_grids_must_share_shape(self, sde):
        with pytest.raises(ValueError, match="shape"):
            dsm_train([np.zeros((2, 2)), np.zeros((3, 2))], DsmTrainConfig(steps=1), sde)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, sde):
        grids = gaussian_grids(0.0, 100.0, np.random.default_rng(0), count=2)
        with pytest.raises(FloatingPointError, match="diverged"):
            dsm_train(grids, DsmTrainConfig(steps=500, learning_rate=50.0), sde)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            DsmTrainConfig(t_eps=0.0)


class TestSerialization:
    def test_round_trip_exact(self, sde, tmp_path, rng):
        net = random_net(rng, conditional=False)
        models = [
            random_net(rng),
            net,
            GaussianScore(complex_normal(rng, 3), rng.uniform(0.1, 1, 3), sde),
            GmmScore([0.25, 0.75], complex_normal(rng, (2, 3)), rng.uniform(0.1, 1, (2, 3)), sde),
            ConditionalScore({SPEECH: GaussianScore(0.0, 1.0, sde), NOISE: net}),
        ]
        a = complex_normal(rng, 3)
        for k, model in enumerate(models):
            save_model(model, tmp_path / f"m{k}.json")
            back = load_model(tmp_path / f"m{k}.json")
            label = SPEECH if model.conditional else None
            assert np.array_equal(back(a, 0.37, label), model(a, 0.37, label))
            assert model_to_json(back) == model_to_json(model)

    def test_rejects_foreign_files(self):
        with pytest.raises(ValueError, match="format"):
            model_from_json('{"format": "other"}')
