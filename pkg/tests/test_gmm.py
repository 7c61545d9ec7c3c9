import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowppf.errors import ArgumentError, ModelError
from flowppf.gmm import COV_FLOOR, Gmm, bic, conditional_params, fit_em, standard_normal


def random_gmm(rng, k=2, d=2, spread=2.0):
    w = rng.dirichlet(np.ones(k) * 3)
    mu = rng.normal(0, spread, (k, d))
    a = rng.standard_normal((k, d, d))
    cov = a @ np.swapaxes(a, 1, 2) + 0.3 * np.eye(d)
    return Gmm(w, mu, cov)


def direct_gaussian(x, mu, cov):
    d = len(mu)
    diff = x - mu
    return np.exp(-0.5 * diff @ np.linalg.inv(cov) @ diff) / np.sqrt((2 * np.pi) ** d * np.linalg.det(cov))


def test_standard_normal_at_mode():
    assert abs(standard_normal(2).density(np.zeros(2)) - 1 / (2 * np.pi)) < 1e-15


def test_density_nonnegative_and_vanishing(rng):
    g = random_gmm(rng)
    x = rng.normal(0, 5, (500, 2))
    assert np.all(g.density(x) >= 0)
    assert g.density(np.array([1e3, -1e3])) == 0.0


def test_density_integrates_to_one(rng):
    g = random_gmm(rng)
    sd = np.sqrt(np.max(g.covs[:, [0, 1], [0, 1]], axis=0))
    lo = g.means.min(axis=0) - 8 * sd
    hi = g.means.max(axis=0) + 8 * sd
    xs = np.linspace(lo[0], hi[0], 801)
    ys = np.linspace(lo[1], hi[1], 801)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    dens = g.density(np.stack([xx.ravel(), yy.ravel()], 1))
    mass = dens.sum() * (xs[1] - xs[0]) * (ys[1] - ys[0])
    assert abs(mass - 1) < 1e-3


def test_density_matches_direct_formula(rng):
    g = random_gmm(rng, k=3, d=3)
    for x in rng.standard_normal((20, 3)):
        ref = sum(w * direct_gaussian(x, m, c) for w, m, c in zip(g.weights, g.means, g.covs))
        assert np.isclose(g.density(x), ref, rtol=1e-12)


def test_rejects_bad_weights():
    with pytest.raises(ModelError):
        Gmm(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))


def test_does_not_freeze_caller_arrays():
    mu = np.zeros((1, 2))
    Gmm(np.ones(1), mu, np.eye(2)[None])
    mu[0, 0] = 1.0


def test_em_degenerate_data():
    x = np.tile([1.5, -2.0], (100, 1))
    g = fit_em(x, 1)
    assert np.allclose(g.means[0], [1.5, -2.0])
    assert np.allclose(g.covs[0], COV_FLOOR * np.eye(2), rtol=1e-6, atol=0)


def test_em_likelihood_at_least_generator(rng):
    gen = Gmm(np.array([0.4, 0.6]), np.array([[-2.0, 0.0], [2.0, 1.0]]),
              np.array([[[1.0, 0.3], [0.3, 0.5]], [[0.6, -0.2], [-0.2, 1.0]]]))
    x = gen.sample(5000, 11)
    fit = fit_em(x, 2, seed=0)
    assert fit.log_density(x).sum() >= gen.log_density(x).sum() - 0.01 * len(x)


def test_em_deterministic(rng):
    x = random_gmm(rng).sample(1000, 1)
    a, b = fit_em(x, 2, seed=5), fit_em(x, 2, seed=5)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.covs, b.covs)


def test_bic_selection_recovers_two_components():
    gen = Gmm(np.array([0.5, 0.5]), np.array([[-4.0, 0.0], [4.0, 0.0]]), np.stack([np.eye(2)] * 2))
    x = gen.sample(3000, 2)
    g = fit_em(x, 0, k_max=4)
    assert g.n_components == 2
    assert bic(g, x) < bic(fit_em(x, 1), x)


def test_em_too_few_samples():
    with pytest.raises(ArgumentError):
        fit_em(np.zeros((5, 2)), 2)


def test_sample_empty_and_negative():
    assert standard_normal(3).sample(0, 1).shape == (0, 3)
    with pytest.raises(ArgumentError):
        standard_normal(3).sample(-1, 1)


def test_sample_mean_clt():
    mu = np.array([0.3, -1.2, 4.0])
    n = 50000
    x = Gmm(np.ones(1), mu[None], np.eye(3)[None]).sample(n, 9)
    assert np.all(np.abs(x.mean(0) - mu) < 3 / np.sqrt(n))


def test_component_frequencies_multinomial():
    w = np.array([0.2, 0.5, 0.3])
    g = Gmm(w, np.array([[-50.0], [0.0], [50.0]]), np.ones((3, 1, 1)))
    n = 50000
    x = g.sample(n, 4)[:, 0]
    counts = np.array([(x < -25).sum(), ((x >= -25) & (x < 25)).sum(), (x >= 25).sum()])
    assert np.all(np.abs(counts - n * w) < 3 * np.sqrt(n * w * (1 - w)))


def test_sample_deterministic(rng):
    g = random_gmm(rng)
    assert np.array_equal(g.sample(10, 3), g.sample(10, 3))


def test_marginal_keep_all_is_identity(rng):
    g = random_gmm(rng, d=3)
    m = g.marginal([0, 1, 2])
    assert np.array_equal(m.means, g.means) and np.array_equal(m.covs, g.covs)


def test_marginal_diagonal():
    g = Gmm(np.ones(1), np.array([[1.0, 2.0]]), np.diag([4.0, 9.0])[None])
    m = g.marginal([0])
    assert m.dim == 1 and m.covs[0, 0, 0] == 4.0 and m.means[0, 0] == 1.0


def test_marginal_matches_quadrature(rng):
    g = random_gmm(rng, k=2, d=2)
    m = g.marginal([0])
    ys = np.linspace(-40, 40, 40001)
    for x0 in (-1.0, 0.0, 1.7):
        joint = g.density(np.stack([np.full_like(ys, x0), ys], 1))
        quad = np.trapezoid(joint, ys)
        assert abs(m.density(np.array([x0])) / quad - 1) < 1e-3


def test_condition_independent_blocks():
    covs = np.array([np.diag([1.0, 2.0, 0.5]), np.diag([0.7, 1.5, 2.0])])
    covs[0, 0, 1] = covs[0, 1, 0] = 0.4
    g = Gmm(np.array([0.3, 0.7]), np.array([[0.0, 1.0, -1.0], [2.0, 0.0, 1.0]]), covs)
    s = np.array([0.4])
    c = g.condition([2], s)
    marg = g.marginal([0, 1])
    assert np.allclose(c.means, marg.means) and np.allclose(c.covs, marg.covs)
    lik = np.array([direct_gaussian(s, g.means[k, 2:], g.covs[k, 2:, 2:]) for k in range(2)])
    assert np.allclose(c.weights, g.weights * lik / (g.weights * lik).sum(), rtol=1e-12)


def test_condition_single_component_weight_one(rng):
    g = random_gmm(rng, k=1, d=4)
    assert g.condition([1, 3], rng.standard_normal(2)).weights[0] == 1.0


def test_condition_bayes_identity(rng):
    g = random_gmm(rng, k=3, d=4)
    obs = [1, 3]
    worst = 0.0
    for _ in range(100):
        full = g.sample(1, rng)[0] + rng.standard_normal(4) * 0.5
        c = g.condition(obs, full[obs])
        lhs = c.density(full[[0, 2]]) * g.marginal(obs).density(full[obs])
        worst = max(worst, abs(lhs / g.density(full) - 1))
    assert worst < 1e-10


def test_conditional_weights_direct_formula(rng):
    """pi_k(s) = w_k N(s; mu_k^s, S_k^ss) / sum_j w_j N(s; mu_j^s, S_j^ss)."""
    g = random_gmm(rng, k=4, d=5)
    obs, free = [0, 2, 4], [1, 3]
    vals = rng.standard_normal((50, 3))
    _, _, logw = conditional_params(g, free, obs, vals)
    for row, s in zip(np.exp(logw), vals):
        num = np.array([g.weights[k] * direct_gaussian(s, g.means[k, obs], g.covs[k][np.ix_(obs, obs)])
                        for k in range(4)])
        assert np.max(np.abs(row - num / num.sum())) < 1e-10


def test_condition_rejects_bad_observation(rng):
    g = random_gmm(rng, d=3)
    with pytest.raises(ArgumentError):
        g.condition([0, 1, 2], np.zeros(3))
    with pytest.raises(ArgumentError):
        g.condition([0], np.array([np.nan]))


def test_json_roundtrip(rng):
    g = random_gmm(rng, k=3, d=3)
    back = Gmm.from_json(g.to_json())
    assert np.array_equal(back.means, g.means) and np.array_equal(back.covs, g.covs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conditional_covariance_psd(seed):
    g = random_gmm(np.random.default_rng(seed), k=2, d=4)
    means, covs, logw = conditional_params(g, [0, 2], [1, 3], np.zeros((1, 2)))
    assert np.all(np.linalg.eigvalsh(covs) > 0)
    assert abs(np.exp(logw).sum() - 1) < 1e-12
