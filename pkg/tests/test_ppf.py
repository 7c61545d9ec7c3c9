import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from flowppf.errors import ArgumentError, DataError, NumericError
from flowppf.flow import FlowConfig, ImnfModel, conditional_log_density
from flowppf.gmm import Gmm, conditional_params
from flowppf.grid import Dataset
from flowppf.ppf import (DensityGrid, GridSpec, LinearPpfModel, bus_dims, estimate_bus_density,
                         fit_linear_baseline, fit_piecewise_linear_baseline, fit_reference, jsd,
                         linear_bus_mixture, linear_density, mae, report, scenario_target, tvd, zscore)
from flowppf.sampling import ScenarioSet, lss_scenarios, mc_scenarios

from helpers import make_model


def gauss_grid(mean, spec, cov=None):
    cov = np.eye(2) if cov is None else cov
    return DensityGrid.of_gmm(Gmm(np.ones(1), np.asarray(mean, float)[None], cov[None]), spec)


# -- estimator -----------------------------------------------------------------

def block_joint(n=5, bus=2):
    """Joint injection mixture whose bus-``bus`` block is independent of the rest."""
    rng = np.random.default_rng(3)
    own, rest = bus_dims(n, bus)
    covs, means = [], []
    for k in range(2):
        c = np.zeros((2 * n, 2 * n))
        a = rng.standard_normal((2 * n - 2, 2 * n - 2)) * 0.3
        c[np.ix_(rest, rest)] = a @ a.T + 0.5 * np.eye(2 * n - 2)
        c[np.ix_(own, own)] = [[0.04, 0.01], [0.01, 0.02]]
        covs.append(c)
        means.append(rng.normal(0, 0.5, 2 * n))
    means[1][own] = means[0][own]          # same own-block in both components
    return Gmm(np.array([0.4, 0.6]), np.array(means), np.array(covs))


def identity_model(network):
    return ImnfModel.for_network(network, FlowConfig(n_pq=network.n_pq, swap=False, n_sfcp=1, n_sf=1))


def test_identity_model_returns_base_density(mesh):
    joint = block_joint()
    model = identity_model(mesh)
    own, _ = bus_dims(5, 2)
    base = joint.marginal(own)
    spec = GridSpec.around(base, n=40)
    est = estimate_bus_density(model, joint, 2, mc_scenarios(scenario_target(joint, 2), 7, seed=0), spec)
    ref = DensityGrid.of_gmm(base, spec)
    assert np.max(np.abs(est.values - ref.values) / ref.values.max()) < 1e-12


def test_identity_estimate_independent_of_T(mesh):
    joint = block_joint()
    model = identity_model(mesh)
    spec = GridSpec.around(joint.marginal(bus_dims(5, 2)[0]), n=30)
    target = scenario_target(joint, 2)
    grids = [estimate_bus_density(model, joint, 2, lss_scenarios(target, T, seed=1), spec).values
             for T in (1, 16, 100)]
    for g in grids[1:]:
        assert np.max(np.abs(g - grids[0]) / grids[0].max()) < 1e-12


def test_single_scenario_equals_conditional_density(mesh, wide_gmm):
    model = make_model(mesh, seed=6)
    target = scenario_target(wide_gmm, 1)
    sc = mc_scenarios(target, 1, seed=4)
    own, rest = bus_dims(5, 1)
    means, covs, logw = conditional_params(wide_gmm, own, rest, sc.scenarios)
    base = Gmm(np.exp(logw[0]), means[0], covs)
    spec = GridSpec(-2, 2, -2, 2, 25, 25)
    est = estimate_bus_density(model, wide_gmm, 1, sc, spec)
    direct = np.exp(conditional_log_density(model, spec.points(), sc.scenarios[0], 1, base))
    assert np.allclose(est.values.ravel(), direct, rtol=1e-12, atol=0)


def test_estimate_argument_errors(mesh, wide_gmm):
    model = make_model(mesh)
    spec = GridSpec(0, 1, 0, 1, 5, 5)
    with pytest.raises(ArgumentError):
        estimate_bus_density(model, wide_gmm, 0, ScenarioSet(np.zeros((0, 8)), "mc", np.zeros(0)), spec)
    with pytest.raises(ArgumentError):
        estimate_bus_density(model, wide_gmm, 0, mc_scenarios(wide_gmm.marginal([0, 1, 2]), 3), spec)


# -- grids ----------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ArgumentError):
        DensityGrid(np.array([0.0, 1.0, 3.0]), np.array([0.0, 1.0]), np.ones((3, 2)))
    with pytest.raises(ArgumentError):
        DensityGrid(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.ones((2, 2)))
    with pytest.raises(NumericError):
        DensityGrid(np.array([0.0, 1.0]), np.array([0.0, 1.0]), -np.ones((2, 2)))


def test_check_mass_bands():
    spec = GridSpec(-6, 6, -6, 6, 121, 121)
    g = gauss_grid([0, 0], spec)
    assert abs(g.check_mass() - 1) < 1e-6
    with pytest.warns(RuntimeWarning):
        DensityGrid(g.vm, g.va, g.values * 1.3).check_mass()
    with pytest.raises(NumericError):
        DensityGrid(g.vm, g.va, g.values * 3).check_mass()


def test_grid_csv_roundtrip(tmp_path):
    g = gauss_grid([0.2, -0.1], GridSpec(-3, 3, -2, 2, 17, 9))
    g.to_csv(tmp_path / "g.csv")
    back = DensityGrid.from_csv(tmp_path / "g.csv")
    assert np.array_equal(back.values, g.values) and np.array_equal(back.vm, g.vm)


# -- metrics ------------------------------------------------------------------

SPEC = GridSpec(-6, 8, -6, 6, 200, 200)


def test_equal_grids_zero():
    g = gauss_grid([0, 0], SPEC)
    assert jsd(g, g) == 0.0 and tvd(g, g) == 0.0


def test_disjoint_supports():
    vm, va = np.linspace(0, 1, 10), np.linspace(0, 1, 10)
    a = np.zeros((10, 10))
    b = np.zeros((10, 10))
    a[:5] = 1.0
    b[5:] = 1.0
    p, q = DensityGrid(vm, va, a), DensityGrid(vm, va, b)
    assert jsd(p, q) == pytest.approx(np.log(2), abs=1e-12)
    assert abs(np.log(2) - 0.6931) < 1e-4
    assert tvd(p, q) == pytest.approx(1.0, abs=1e-12)


def fine_jsd(mu_p, mu_q, n=2000, lo=-8.0, hi=10.0):
    """Independent fine-grid quadrature of the JSD of two unit 2-D Gaussians."""
    x = np.linspace(lo, hi, n)
    dx = x[1] - x[0]
    xx, yy = np.meshgrid(x, x, indexing="ij")
    p = np.exp(-0.5 * ((xx - mu_p[0]) ** 2 + (yy - mu_p[1]) ** 2)) / (2 * np.pi)
    q = np.exp(-0.5 * ((xx - mu_q[0]) ** 2 + (yy - mu_q[1]) ** 2)) / (2 * np.pi)
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.where(p > 0, p * np.log(p / m), 0.0).sum() * dx * dx
        kl_q = np.where(q > 0, q * np.log(q / m), 0.0).sum() * dx * dx
    return 0.5 * kl_p + 0.5 * kl_q


def test_jsd_matches_fine_quadrature():
    ours = jsd(gauss_grid([0, 0], SPEC), gauss_grid([2, 0], SPEC))
    assert abs(ours - fine_jsd([0, 0], [2, 0])) < 1e-3


def test_tvd_matches_erf():
    delta = 1.3
    ours = tvd(gauss_grid([0, 0], SPEC), gauss_grid([delta, 0], SPEC))
    assert abs(ours - erf(delta / (2 * np.sqrt(2)))) < 1e-3


def test_axis_mismatch():
    with pytest.raises(ArgumentError):
        jsd(gauss_grid([0, 0], SPEC), gauss_grid([0, 0], GridSpec(-6, 8, -6, 6, 200, 199)))
    with pytest.raises(ArgumentError):
        tvd(gauss_grid([0, 0], SPEC), gauss_grid([0, 0], GridSpec(-6, 7, -6, 6, 200, 200)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metric_symmetry_and_bounds(seed):
    rng = np.random.default_rng(seed)
    vm, va = np.linspace(0, 1, 12), np.linspace(-1, 1, 9)
    a = rng.random((12, 9)) * (rng.random((12, 9)) > 0.3)
    b = rng.random((12, 9)) * (rng.random((12, 9)) > 0.3)
    a[0, 0] = b[0, 0] = 0.1
    p, q = DensityGrid(vm, va, a), DensityGrid(vm, va, b)
    assert abs(jsd(p, q) - jsd(q, p)) < 1e-12
    assert 0 <= jsd(p, q) <= np.log(2) and 0 <= tvd(p, q) <= 1


def test_mae_examples(rng):
    t = rng.standard_normal((50, 3))
    assert np.all(mae(t, t) == 0)
    pz, tz = zscore(t, t)
    assert np.allclose(mae(tz + 1, tz), 1.0, rtol=0, atol=1e-15)
    p = rng.standard_normal((50, 3))
    direct = np.array([sum(abs(p[i, j] - t[i, j]) for i in range(50)) / 50 for j in range(3)])
    assert np.max(np.abs(mae(p, t) - direct)) <= 1e-15
    with pytest.raises(ArgumentError):
        mae(p, t[:, :2])


def test_report_fields():
    g = gauss_grid([0, 0], SPEC)
    r = report(3, "lss", 500, g, g, 1.5)
    assert set(r) == {"bus", "method", "T", "jsd", "tvd", "mass", "runtime_s"} and r["jsd"] == 0


# -- reference fit ---------------------------------------------------------------

def test_reference_mean_moment(rng):
    mu, sd = np.array([0.97, -0.05]), np.array([0.01, 0.02])
    x = mu + sd * rng.standard_normal((2500, 2))
    fit = fit_reference(x, k=1)
    assert np.all(np.abs(fit.means[0] - mu) < 3 * sd / np.sqrt(2500))


def test_reference_self_fit_jsd():
    gen = Gmm(np.array([0.4, 0.6]), np.array([[0.97, -0.05], [0.95, -0.08]]),
              np.array([np.diag([1e-4, 4e-4]), [[2e-4, 1e-4], [1e-4, 3e-4]]]))
    fit = fit_reference(gen.sample(2500, 1))
    spec = GridSpec.around(gen, n=200)
    assert jsd(DensityGrid.of_gmm(fit, spec), DensityGrid.of_gmm(gen, spec)) < 0.05


def test_reference_single_component_recovers_moments(rng):
    x = rng.standard_normal((4000, 2))
    x = np.concatenate([x, -x])         # exactly symmetric about the origin
    fit = fit_reference(x, k=1)
    assert np.max(np.abs(fit.means[0])) < 1e-12
    assert np.allclose(fit.covs[0], np.cov(x.T, bias=True), rtol=1e-6)


def test_reference_rejects_wrong_width(rng):
    with pytest.raises(ArgumentError):
        fit_reference(rng.standard_normal((100, 3)))


# -- linear baselines ---------------------------------------------------------------

def affine_dataset(n=4000, d=4, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 0.3, (d, d)) + np.eye(d)
    b = rng.normal(0, 0.1, d)
    joint = Gmm(np.array([0.5, 0.5]), rng.normal(0, 1, (2, d)), np.stack([0.3 * np.eye(d)] * 2))
    w = joint.sample(n, seed)
    return Dataset(list(range(2, 2 + d // 2)), w, w @ A.T + b), joint, A, b


def test_exact_affine_recovered_and_pushforward_matches_histogram():
    ds, joint, A, b = affine_dataset()
    lin = fit_linear_baseline(ds)
    assert lin.residual_mae < 1e-12 and np.allclose(lin.A, A) and np.allclose(lin.b, b)
    mix = linear_bus_mixture(lin, joint, 1)
    spec = GridSpec.around(mix, n=20)   # coarse bins keep histogram noise well under the threshold
    grid = linear_density(lin, joint, 1, spec)
    states = lin.predict(joint.sample(100_000, 5))[:, [1, 3]]
    step_vm, step_va = spec.vm[1] - spec.vm[0], spec.va[1] - spec.va[0]
    edges_vm = np.concatenate([spec.vm - step_vm / 2, [spec.vm[-1] + step_vm / 2]])
    edges_va = np.concatenate([spec.va - step_va / 2, [spec.va[-1] + step_va / 2]])
    hist, _, _ = np.histogram2d(states[:, 0], states[:, 1], [edges_vm, edges_va], density=True)
    assert tvd(grid, DensityGrid(spec.vm, spec.va, hist)) < 0.02


def test_identity_affine_map_preserves_mixture():
    _, joint, _, _ = affine_dataset()
    out = LinearPpfModel(np.eye(4), np.zeros(4), 0.0, np.zeros(4)).pushforward(joint)
    assert np.allclose(out.means, joint.means) and np.allclose(out.covs, joint.covs)
    assert np.array_equal(out.weights, joint.weights)


def test_rank_deficient_regression():
    w = np.ones((50, 4))
    with pytest.raises(DataError):
        fit_linear_baseline(Dataset([1, 2], w, w))


def test_piecewise_single_component_is_linear():
    ds, joint, _, _ = affine_dataset()
    one = Gmm(np.ones(1), joint.mean()[None], joint.covariance()[None])
    lin = fit_linear_baseline(ds)
    pw = fit_piecewise_linear_baseline(ds, one)
    assert np.allclose(pw.bus_mixture(0).means, linear_bus_mixture(lin, one, 0).means, rtol=0, atol=1e-12)
    assert np.allclose(pw.bus_mixture(0).covs, linear_bus_mixture(lin, one, 0).covs, rtol=0, atol=1e-12)


def test_piecewise_two_regime_generator():
    rng = np.random.default_rng(2)
    joint = Gmm(np.array([0.5, 0.5]), np.array([[-3.0, -3.0], [3.0, 3.0]]), np.stack([0.2 * np.eye(2)] * 2))
    w = joint.sample(3000, 1)
    maps = [(np.array([[1.0, 0.2], [0.1, 0.8]]), np.array([0.1, 0.0])),
            (np.array([[0.5, -0.3], [0.4, 1.2]]), np.array([-0.2, 0.3]))]
    reg = (w[:, 0] > 0).astype(int)
    x = np.stack([maps[r][0] @ wi + maps[r][1] for r, wi in zip(reg, w)])
    pw = fit_piecewise_linear_baseline(Dataset([2], w, x), joint)
    for k in range(2):
        assert pw.maps[pw.regime_of[k]].residual_mae < 1e-10
    spec = GridSpec.around(pw.bus_mixture(0), n=200, sigmas=6)
    assert abs(pw.density(0, spec).mass - 1) < 1e-3


def test_piecewise_merges_small_component():
    ds, joint, _, _ = affine_dataset(n=2000)
    tiny = Gmm(np.array([0.49, 0.49, 0.02]), np.vstack([joint.means, [[40.0] * 4]]),
               np.concatenate([joint.covs, 0.3 * np.eye(4)[None]]))
    with pytest.warns(RuntimeWarning, match="merged"):
        pw = fit_piecewise_linear_baseline(ds, tiny)
    assert pw.regime_of[2] in (0, 1)
