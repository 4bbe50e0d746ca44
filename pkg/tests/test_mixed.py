import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import make_dataset
from oracles import (dense_design, dense_reml_deviance, expand_ratios, gls_beta,
                     grid_search_theta, ols_reml_deviance, simulate_var)
from mespecvar import mixed
from mespecvar.exceptions import DataError
from mespecvar.mixed import (MixedVarFit, OptimizerConfig, build_design, design_from_arrays,
                             fit_ml, fit_ml_nested, fit_reml, fixed_effect_inference,
                             full_deviance, profiled_deviance, profiled_deviance_gradient)


def population(rng, n_per_group=4, r=2, t=60, phi=None, tau=0.0, groups=None):
    phi = 0.3 * np.eye(r) if phi is None else phi
    groups = groups or [1] * n_per_group + [2] * n_per_group
    arrays = []
    for _ in groups:
        a = phi + tau * rng.standard_normal((r, r))
        arrays.append(simulate_var([a], t, rng, burn=200))
    return arrays, groups


def tiny_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    r = int(rng.integers(1, 3))
    t = int(rng.integers(20, 41))
    groups = [1, 2] + [int(g) for g in rng.integers(1, 3, n - 2)]
    arrays, _ = population(rng, r=r, t=t, tau=0.2, groups=groups)
    return arrays, groups, r


def test_design_dimensions():
    rng = np.random.default_rng(0)
    d = design_from_arrays([rng.standard_normal((5, 2)) for _ in range(2)], [1, 2], 0, 1)
    assert d.y.shape == (8,)
    assert d.X.shape == (8, 4)
    assert d.Z.shape == (8, 4)
    z = d.Z.toarray()
    assert np.all(z[:4, 2:] == 0) and np.all(z[4:, :2] == 0)


def test_design_structure_against_explicit_layout(rng):
    arrays, groups = population(rng, n_per_group=3, r=3, t=30, tau=0.1)
    groups = [1, 2, 1, 2, 2, 1]
    d = design_from_arrays(arrays, groups, 2, 2)
    y, X, Z = dense_design(arrays, groups, 2, 2)
    np.testing.assert_array_equal(d.y, y)
    np.testing.assert_array_equal(d.X, X)
    np.testing.assert_array_equal(d.Z.toarray(), Z)
    q = d.q
    nonzero = np.stack([np.any(d.X[:, g * q:(g + 1) * q] != 0, axis=1) for g in range(2)])
    assert np.all(nonzero.sum(axis=0) == 1)
    g1_rows = d.row_groups() == 1
    g1_cols = np.concatenate([np.arange(i * q, (i + 1) * q)
                              for i, g in enumerate(groups) if g == 1])
    np.testing.assert_array_equal(d.X[g1_rows][:, :q],
                                  d.Z.toarray()[g1_rows][:, g1_cols].reshape(
                                      g1_rows.sum(), -1, q).sum(axis=1))
    assert d.fixed_labels[q] == (2, "ch1", 1)
    assert d.fixed_labels[q + 3] == (2, "ch1", 2)


def test_design_errors(rng):
    x = rng.standard_normal((30, 2))
    with pytest.raises(DataError):
        design_from_arrays([x, x], [1, 1], 0, 1)
    with pytest.raises(DataError):
        design_from_arrays([x, x[:3]], [1, 2], 0, 1)
    with pytest.raises(DataError):
        design_from_arrays([x, rng.standard_normal((30, 3))], [1, 2], 0, 1)
    with pytest.raises(DataError):
        build_design(make_dataset([x, x], [1, 2]), "nope", 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["REML", "ML"]))
def test_profiled_deviance_matches_dense_oracle(seed, mode):
    arrays, groups, r = tiny_instance(seed)
    rng = np.random.default_rng(seed + 1)
    d = design_from_arrays(arrays, groups, 0, 1)
    y, X, Z = dense_design(arrays, groups, 0, 1)
    theta = rng.uniform(0, 2, (2, r)) * (rng.random((2, r)) > 0.2)
    ref, beta, _ = dense_reml_deviance(X, Z, y, expand_ratios(theta, groups), mode)
    assert abs(profiled_deviance(d, theta, mode) - ref) < 1e-6
    np.testing.assert_allclose(mixed._profile(d, theta).beta_full().ravel(), beta, atol=1e-8)


def test_zero_theta_is_fixed_effects_regression(rng):
    arrays, groups = population(rng)
    d = design_from_arrays(arrays, groups, 1, 1)
    ref, beta, rss = ols_reml_deviance(d.X, d.y)
    assert abs(profiled_deviance(d, 0.0) - ref) < 1e-8
    n, p = d.X.shape
    ml_ref = n * (1 + np.log(2 * np.pi * rss / n))
    assert abs(profiled_deviance(d, 0.0, "ML") - ml_ref) < 1e-8


def test_duplicated_subjects_keep_beta(rng):
    arrays, groups = population(rng, n_per_group=3)
    theta = rng.uniform(0.1, 1.0, (2, 2))
    d1 = design_from_arrays(arrays, groups, 0, 1)
    d2 = design_from_arrays(arrays + arrays, groups + groups, 0, 1)
    np.testing.assert_allclose(mixed._profile(d2, theta).beta_full(),
                               mixed._profile(d1, theta).beta_full(), atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["REML", "ML"]))
def test_gradient_matches_finite_differences(seed, mode):
    arrays, groups, r = tiny_instance(seed)
    d = design_from_arrays(arrays, groups, 0, 1)
    theta = np.random.default_rng(seed).uniform(0.2, 1.5, (2, r))
    g = profiled_deviance_gradient(d, theta, mode)
    h = 1e-6
    for idx in np.ndindex(theta.shape):
        e = np.zeros_like(theta)
        e[idx] = h
        fd = (profiled_deviance(d, theta + e, mode) - profiled_deviance(d, theta - e, mode)) / (2 * h)
        assert abs(fd - g[idx]) < 1e-5 * max(1.0, abs(fd))


def test_full_gradient_matches_finite_differences(rng):
    arrays, groups = population(rng, tau=0.1)
    d = design_from_arrays(arrays, groups, 0, 1)
    tau = rng.uniform(0.05, 0.3, (2, 2))
    sigma = 0.9
    free = np.ones_like(tau, bool)
    g = mixed._full_grad(d, tau, sigma, free)
    x0 = np.append(tau.ravel(), sigma)
    h = 1e-6

    def f(x):
        return full_deviance(d, x[:-1].reshape(2, 2), x[-1])

    fd = [(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(5)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)


def test_full_deviance_minimised_at_profiled_sigma(rng):
    arrays, groups = population(rng, tau=0.1)
    d = design_from_arrays(arrays, groups, 0, 1)
    fit = fit_reml(d, OptimizerConfig(inference=False))
    assert full_deviance(d, fit.tau, fit.sigma) == pytest.approx(fit.deviance, abs=1e-8)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("method", ["lbfgsb", "nelder-mead"])
def test_fit_matches_grid_search(seed, method):
    arrays, groups, r = tiny_instance(1000 + seed)
    d = design_from_arrays(arrays, groups, 0, 1)
    y, X, Z = dense_design(arrays, groups, 0, 1)

    def oracle(theta):
        return dense_reml_deviance(X, Z, y, expand_ratios(theta.reshape(2, r), groups))[0]

    fit = fit_reml(d, OptimizerConfig(method=method, inference=False))
    grid_theta, grid_dev = grid_search_theta(oracle, 2 * r)
    assert oracle(fit.theta.ravel()) <= grid_dev + 1e-6
    identified = np.repeat(np.bincount(groups, minlength=3)[1:] >= 2, r)
    diff = np.abs(fit.theta.ravel() - grid_theta)[identified]
    assert np.all(diff <= 1e-3 + 1e-9)


def test_fit_reports_convergence_and_gradient(rng):
    arrays, groups = population(rng, tau=0.15, t=200)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1))
    c = fit.convergence
    assert c["converged"] and c["scaled_gradient_norm"] <= 1e-3
    assert c["optimizer"] == "lbfgsb" and len(c["start_deviances"]) == 2
    assert np.allclose(fit.beta_cov, fit.beta_cov.T)
    assert np.all(np.linalg.eigvalsh(fit.beta_cov) >= -1e-12)
    # interior optimum: central differences of the deviance vanish
    interior = fit.theta > 1e-3
    h = 1e-5
    d = design_from_arrays(arrays, groups, 0, 1)
    grad = []
    for idx in zip(*np.nonzero(interior)):
        e = np.zeros_like(fit.theta)
        e[idx] = h
        grad.append((profiled_deviance(d, fit.theta + e) - profiled_deviance(d, fit.theta - e)) / (2 * h))
    assert np.linalg.norm(grad) / abs(fit.deviance) <= 1e-3


def test_boundary_components_are_exact_zero(rng):
    arrays, groups = population(rng, tau=0.0, t=300)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1))
    assert np.all((fit.tau == 0) | (fit.tau > 1e-4 * fit.sigma))
    assert len(fit.convergence["boundary"]) == int((fit.tau == 0).sum())
    if (fit.tau == 0).any():
        assert fit.convergence["warning"] == "boundary"


def test_null_variance_recovery():
    # 100 replicates at full scale
    taus, within = [], []
    for rep in range(25):
        rng = np.random.default_rng([17, rep])
        arrays, groups = population(rng, n_per_group=5, t=300, tau=0.0)
        d = design_from_arrays(arrays, groups, 0, 1)
        fit = fit_reml(d, OptimizerConfig(inference=False))
        taus.append(fit.tau.max())
        pooled = np.linalg.lstsq(d.X, d.y, rcond=None)[0]
        within.append(np.all(np.abs(fit.beta - pooled) <= 2 * fit.se))
    assert np.mean(taus) <= 0.05
    assert np.all(within)


def test_permutation_invariance(rng):
    arrays, groups = population(rng, tau=0.1, t=120)
    d = design_from_arrays(arrays, groups, 0, 1)
    order = rng.permutation(len(arrays))
    cfg = OptimizerConfig(inference=False)
    a, b = fit_reml(d, cfg), fit_reml(d.permuted(order), cfg)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)
    np.testing.assert_allclose(a.tau, b.tau, atol=1e-6)
    assert a.sigma == pytest.approx(b.sigma, abs=1e-8)
    np.testing.assert_allclose(a.blups[order], b.blups, atol=1e-6)


def test_joint_rescaling_keeps_beta(rng):
    arrays, groups = population(rng, tau=0.1, t=120)
    cfg = OptimizerConfig(inference=False)
    a = fit_reml(design_from_arrays(arrays, groups, 0, 1), cfg)
    b = fit_reml(design_from_arrays([3.7 * x for x in arrays], groups, 0, 1), cfg)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)
    assert b.sigma == pytest.approx(3.7 * a.sigma, rel=1e-6)


def test_blup_shrinkage_single_regressor(rng):
    arrays, groups = population(rng, r=1, t=80, phi=np.array([[0.4]]), tau=0.2)
    d = design_from_arrays(arrays, groups, 0, 1)
    fit = fit_reml(d, OptimizerConfig(inference=False))
    for i, g in enumerate(groups):
        own = d.c[i, 0] / d.A[i, 0, 0]
        assert abs(fit.blups[i, 0]) <= abs(own - fit.beta[g - 1]) + 1e-8


def test_blups_vanish_with_theta(rng):
    arrays, groups = population(rng, tau=0.2)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1),
                   OptimizerConfig(random_effects=False))
    assert np.all(fit.blups == 0)


def test_fixed_effects_only_matches_regression_t_test(rng):
    arrays, groups = population(rng, n_per_group=4, t=100)
    d = design_from_arrays(arrays, groups, 0, 1)
    fit = fit_reml(d, OptimizerConfig(random_effects=False))
    X, y = d.X, d.y
    n, p = X.shape
    b = np.linalg.solve(X.T @ X, X.T @ y)
    s2 = np.sum((y - X @ b) ** 2) / (n - p)
    se = np.sqrt(s2 * np.diag(np.linalg.inv(X.T @ X)))
    for k, test in enumerate(fixed_effect_inference(fit)):
        assert test.t == pytest.approx(b[k] / se[k], abs=1e-6)
        assert test.df == pytest.approx(n - p, abs=1e-6)
        assert test.p == pytest.approx(2 * stats.t.sf(abs(b[k] / se[k]), n - p), abs=1e-6)
        assert not test.normal_approximation


def test_large_df_matches_normal(rng):
    arrays, groups = population(rng, n_per_group=5, t=2000)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1), OptimizerConfig(random_effects=False))
    for test in fixed_effect_inference(fit):
        assert abs(test.p - 2 * stats.norm.sf(abs(test.t))) < 1e-3


def test_inference_requires_information(rng):
    arrays, groups = population(rng)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1), OptimizerConfig(inference=False))
    with pytest.raises(ValueError):
        fixed_effect_inference(fit)


def test_cross_group_covariance_is_zero(rng):
    arrays, groups = population(rng, tau=0.1)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1))
    q = 2
    assert np.max(np.abs(fit.beta_cov[:q, q:])) <= 1e-10


def test_fit_serialisation_round_trip(rng):
    arrays, groups = population(rng, tau=0.1)
    fit = fit_reml(design_from_arrays(arrays, groups, 0, 1), band="alpha")
    back = MixedVarFit.from_dict(fit.to_dict())
    np.testing.assert_array_equal(back.beta, fit.beta)
    np.testing.assert_array_equal(back.vc_information, fit.vc_information)
    assert back.labels == fit.labels and back.band == "alpha"
    assert [t.p for t in fixed_effect_inference(back)] == [t.p for t in fixed_effect_inference(fit)]


def test_ml_nested_without_exclusion(rng):
    arrays, groups = population(rng, tau=0.1)
    d = design_from_arrays(arrays, groups, 0, 1)
    full, reduced = fit_ml_nested(d, [])
    assert full.ml_deviance == reduced.ml_deviance == fit_ml(d).ml_deviance
    assert full.reml_deviance is None


def test_ml_nested_drops_columns(rng):
    arrays, groups = population(rng, tau=0.1)
    d = design_from_arrays(arrays, groups, 0, 1)
    full, reduced = fit_ml_nested(d, [(1, "ch2", 1)])
    assert (1, "ch2", 1) not in reduced.labels and len(reduced.labels) == 3
    assert reduced.ml_deviance >= full.ml_deviance - 1e-6
    with pytest.raises(KeyError):
        fit_ml_nested(d, [(3, "ch2", 1)])


def test_lrt_power():
    # >= 90% power target; 20 replicates keep this fast
    stats_ = []
    for rep in range(20):
        rng = np.random.default_rng([23, rep])
        phi = np.array([[0.2, 0.0], [0.5, 0.2]])
        arrays, groups = population(rng, n_per_group=5, t=500, phi=phi, tau=0.05)
        d = design_from_arrays(arrays, groups, 1, 1)
        full, reduced = fit_ml_nested(d, [(1, "ch1", 1)])
        stats_.append(reduced.ml_deviance - full.ml_deviance)
    assert np.mean(np.array(stats_) > 3.84) >= 0.9
