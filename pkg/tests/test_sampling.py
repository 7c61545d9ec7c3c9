import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from flowppf.errors import ArgumentError, CapabilityError
from flowppf.gmm import Gmm, standard_normal
from flowppf.sampling import (LssConfig, ScenarioSet, lss_group_sets, lss_scenarios, lss_uniform, mc_scenarios,
                              qmc_points, rosenblatt, to_scenarios)


def radical_inverse(i: int) -> float:
    """Base-2 van der Corput radical inverse."""
    out, f = 0.0, 0.5
    while i:
        out += f * (i & 1)
        i >>= 1
        f /= 2
    return out


def star_discrepancy_2d(u: np.ndarray) -> float:
    """Exact D* for a 2-D set by enumerating anchored boxes on the point grid."""
    xs = np.unique(np.concatenate([u[:, 0], [1.0]]))
    ys = np.unique(np.concatenate([u[:, 1], [1.0]]))
    n = len(u)
    open_cnt = ((u[:, 0][None, None] < xs[:, None, None]) & (u[:, 1][None, None] < ys[None, :, None])).sum(2)
    closed_cnt = ((u[:, 0][None, None] <= xs[:, None, None]) & (u[:, 1][None, None] <= ys[None, :, None])).sum(2)
    vol = xs[:, None] * ys[None, :]
    return float(max(np.max(vol - open_cnt / n), np.max(closed_cnt / n - vol)))


def wide_target():
    return Gmm(np.array([0.3, 0.7]), np.array([[0.0, 1.0, -1.0, 0.5], [1.0, -0.5, 0.0, 0.0]]),
               np.stack([np.eye(4) + 0.3, 0.5 * np.eye(4) + 0.2]))


def test_sobol_textbook_values():
    assert qmc_points(1, 4, "sobol", seed=None)[:, 0].tolist() == [0.5, 0.75, 0.25, 0.375]
    # the one-dimensional Sobol sequence is the radical inverse taken in Gray-code order
    ref = [radical_inverse(i ^ (i >> 1)) for i in range(1, 257)]
    assert np.array_equal(qmc_points(1, 256, "sobol", seed=None)[:, 0], ref)


@pytest.mark.parametrize("kind", ["sobol", "halton"])
@pytest.mark.parametrize("seed", [None, 0, 7])
def test_open_unit_cube(kind, seed):
    u = qmc_points(5, 1024, kind, seed)
    assert np.all(u > 0) and np.all(u < 1)


def test_capability_and_argument_errors():
    with pytest.raises(CapabilityError):
        qmc_points(65, 4, "halton")
    with pytest.raises(ArgumentError):
        qmc_points(2, 4, "lattice")
    with pytest.raises(ArgumentError):
        qmc_points(0, 4)


def test_star_discrepancy_beats_random():
    rng = np.random.default_rng(0)
    qmc = star_discrepancy_2d(qmc_points(2, 256, "sobol", seed=3))
    rand = np.mean([star_discrepancy_2d(rng.random((256, 2))) for _ in range(20)])
    assert qmc < rand


def test_single_group_is_permuted_qmc_set():
    cfg = LssConfig([[0, 1, 2]], 128, seed=4)
    u = lss_uniform(cfg)
    ref = lss_group_sets(cfg)[0]
    assert not np.array_equal(u, ref)
    assert np.array_equal(u[np.lexsort(u.T[::-1])], ref[np.lexsort(ref.T[::-1])])


def test_group_columns_recover_qmc_sets():
    cfg = LssConfig([[0, 3], [1, 4], [2, 5]], 100, seed=2)
    u = lss_uniform(cfg)
    for g, pts in zip(cfg.groups, lss_group_sets(cfg)):
        sub = u[:, g]
        assert np.array_equal(sub[np.lexsort(sub.T[::-1])], pts[np.lexsort(pts.T[::-1])])


def test_permutation_seed_changes_pairing_only():
    a = lss_uniform(LssConfig([[0, 2], [1, 3]], 64, seed=1, perm_seed=10))
    b = lss_uniform(LssConfig([[0, 2], [1, 3]], 64, seed=1, perm_seed=11))
    assert not np.array_equal(a, b)
    for g in ([0, 2], [1, 3]):
        assert sorted(map(tuple, a[:, g])) == sorted(map(tuple, b[:, g]))


@pytest.mark.parametrize("groups", [[[0], [0, 1]], [[0], [2]], [[], [0, 1]]])
def test_invalid_partitions(groups):
    with pytest.raises(ArgumentError):
        LssConfig(groups, 8)


def test_rosenblatt_independent_normals(rng):
    u = rng.uniform(0.01, 0.99, (200, 3))
    s = rosenblatt(u, standard_normal(3))
    assert np.max(np.abs(s - norm.ppf(u))) < 1e-8
    assert np.max(np.abs(rosenblatt(np.full((1, 3), 0.5), standard_normal(3)))) < 1e-9


def test_rosenblatt_rejects_closed_cube():
    with pytest.raises(ArgumentError):
        rosenblatt(np.array([[0.0, 0.5]]), standard_normal(2))


def test_lss_moments():
    g = wide_target()
    T = 10_000
    s = lss_scenarios(g, T, seed=3).scenarios
    sd = np.sqrt(np.diag(g.covariance()))
    assert np.all(np.abs(s.mean(0) - g.mean()) < 4 * sd / np.sqrt(T))


def test_lss_correlation():
    cov = np.array([[1.0, 0.7], [0.7, 2.0]])
    s = lss_scenarios(Gmm(np.ones(1), np.zeros((1, 2)), cov[None]), 4096, seed=1).scenarios
    target = 0.7 / np.sqrt(2.0)
    assert abs(np.corrcoef(s.T)[0, 1] - target) < 0.05


def _spread(target, f, T=256, seeds=20):
    lss = [f(lss_scenarios(target, T, seed=k).scenarios).mean() for k in range(seeds)]
    mc = [f(mc_scenarios(target, T, seed=k).scenarios).mean() for k in range(seeds)]
    return np.var(lss), np.var(mc)


def test_lss_variance_not_above_mc_product_of_squares():
    """One (p, q) group: the whole integrand sees the low-discrepancy set."""
    g = Gmm(np.array([0.3, 0.7]), np.array([[0.0, 1.0], [1.0, -0.5]]),
            np.stack([[[1.0, 0.3], [0.3, 1.0]], [[0.5, 0.2], [0.2, 0.5]]]))
    lss, mc = _spread(g, lambda s: np.prod(s ** 2, axis=1))
    assert lss <= mc


def test_lss_variance_not_above_mc_additive():
    """Several groups: integrands that decompose over groups benefit from every group's set."""
    lss, mc = _spread(wide_target(), lambda s: np.sum(s ** 2, axis=1))
    assert lss <= mc


def test_mc_degenerate_draw():
    mu = np.array([0.3, -0.2, 0.1, 0.0])
    s = mc_scenarios(Gmm(np.ones(1), mu[None], 1e-12 * np.eye(4)[None]), 1, seed=0).scenarios
    assert np.max(np.abs(s[0] - mu)) < 1e-4


def test_mc_deterministic_and_shared_path():
    g = wide_target()
    a, b = mc_scenarios(g, 50, seed=9), mc_scenarios(g, 50, seed=9)
    assert np.array_equal(a.scenarios, b.scenarios)
    assert np.array_equal(a.scenarios, g.sample(50, 9))
    assert np.allclose(a.log_density, g.log_density(a.scenarios))


def test_scenario_csv_roundtrip(tmp_path):
    s = lss_scenarios(wide_target(), 20, seed=0)
    s.to_csv(tmp_path / "s.csv")
    back = ScenarioSet.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.scenarios, s.scenarios) and np.array_equal(back.log_density, s.log_density)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300), st.integers(0, 1000))
def test_lss_within_group_structure(T, seed):
    cfg = LssConfig.paired(3, T, seed=seed)
    u = lss_uniform(cfg)
    assert u.shape == (T, 6) and np.all((u > 0) & (u < 1))
    for g, pts in zip(cfg.groups, lss_group_sets(cfg)):
        assert sorted(map(tuple, u[:, g])) == sorted(map(tuple, pts))
