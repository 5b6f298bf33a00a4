import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.fastmvp import n_theta, parse_theta, quadratic_terms
from artifact.grid import GridShape, IncompleteGrid, build_simple_mcr
from artifact.gpr import (
    Adam,
    DegenerateDataError,
    GprConfig,
    PriorSpec,
    dense_objective,
    fit,
    initial_hyperparameters,
    objective_and_gradient,
    prior_terms,
    standardize,
)
from artifact.kernel import assemble
from artifact.oracle import dense_dK, dense_gpr, dense_pairwise

from conftest import random_grid


def _target(X):
    return np.sin(X).sum(axis=1) + 0.3 * X[:, 0] * X[:, 1]


def _data(rng, D=3, n=4, alpha=2):
    grids = [np.concatenate([[0.0], np.sort(rng.uniform(-2, 2, n - 1))]) for _ in range(D)]
    g = IncompleteGrid(GridShape(grids), build_simple_mcr(D, alpha))
    return g, _target(g.coordinates())


# -- standardization --------------------------------------------------------


def test_standardize_outputs_population_std():
    g = IncompleteGrid(GridShape([[0.0, 1.0]]), build_simple_mcr(1, 1))
    _, ys, st_ = standardize(g, [1.0, 3.0])
    np.testing.assert_allclose(ys, [-1.0, 1.0])
    assert st_.y_mean == 2.0 and st_.y_scale == 1.0


def test_standardize_identity_on_standardized(rng):
    g, y = _data(rng)
    sg, ys, _ = standardize(g, y)
    sg2, ys2, st2 = standardize(sg, ys)
    np.testing.assert_allclose(st2.x_mean, 0, atol=1e-14)
    np.testing.assert_allclose(st2.x_scale, 1, rtol=1e-14)
    assert abs(st2.y_mean) < 1e-14 and st2.y_scale == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_allclose(ys2, ys, atol=1e-14)


def test_standardize_round_trip_and_moments(rng):
    g, y = _data(rng)
    sg, ys, st_ = standardize(g, y)
    np.testing.assert_allclose(st_.restore_outputs(ys), y, rtol=1e-14, atol=1e-14)
    X = sg.coordinates()
    np.testing.assert_allclose(X.mean(axis=0), 0, atol=1e-13)
    np.testing.assert_allclose(X.std(axis=0), 1, rtol=1e-13)
    np.testing.assert_allclose(st_.inputs(g.coordinates()), X, atol=1e-13)


def test_standardize_degenerate():
    g = IncompleteGrid(GridShape([[0.0, 1.0, 2.0]]), build_simple_mcr(1, 1))
    with pytest.raises(DegenerateDataError):
        standardize(g, [2.0, 2.0, 2.0])


# -- initial values and priors ----------------------------------------------


def test_initial_values():
    g = IncompleteGrid(GridShape([[0.0, -1.0, 1.0, 2.0], [0.0, 0.5]]), build_simple_mcr(2, 2))
    s2, ell = initial_hyperparameters(g, 2)
    np.testing.assert_array_equal(s2, [1e-4, 0.125, 0.25])
    np.testing.assert_allclose(ell, [2.0, 1.0])
    s2, _ = initial_hyperparameters(build_grid := IncompleteGrid(GridShape.from_sizes([2] * 5), build_simple_mcr(5, 5)), 5)
    assert s2[3] == 0.5 and s2[4] == 1.0 and s2[5] == 2.0


def test_gamma_prior_value_and_gradient():
    z = np.log([0.05, 0.3])
    v, g = prior_terms(z, [], 2, PriorSpec())
    assert v == pytest.approx(-(0.05 + 0.3) / 0.1)
    np.testing.assert_allclose(g, [-0.5, -3.0])


def test_ell_prior_mode():
    alpha = 3
    mu = np.sqrt(2) + np.log(np.sqrt(2 * alpha))
    _, g = prior_terms([], [mu, mu], alpha, PriorSpec())
    np.testing.assert_allclose(g, 0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(
    z=st.lists(st.floats(-5, 2), min_size=1, max_size=4),
    lam=st.lists(st.floats(-3, 3), min_size=1, max_size=4),
    shape=st.floats(0.5, 3.0),
    alpha=st.integers(1, 4),
)
def test_prior_gradient_fd(z, lam, shape, alpha):
    spec = PriorSpec(gamma_shape=shape)
    p = np.array(z + lam)
    nz = len(z)
    _, g = prior_terms(p[:nz], p[nz:], alpha, spec)
    h = 1e-6
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        fp = prior_terms((p + e)[:nz], (p + e)[nz:], alpha, spec)[0]
        fm = prior_terms((p - e)[:nz], (p - e)[nz:], alpha, spec)[0]
        assert g[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-8, abs=1e-8)


def test_prior_disabled():
    v, g = prior_terms([0.0], [0.0, 1.0], 1, PriorSpec(enabled=False))
    assert v == 0.0 and not g.any()


# -- objective --------------------------------------------------------------


def test_objective_zero_kernel_closed_form(rng):
    g, y = _data(rng)
    sg, ys, _ = standardize(g, y)
    cfg = GprConfig(noise=0.3, prior=PriorSpec(enabled=False))
    obj = objective_and_gradient(sg, g.mcr, ys, np.full(3, -np.inf), np.zeros(3), cfg)
    N = g.total
    expected = -0.5 * (ys @ ys / 0.3 + N * np.log(0.3) + N * np.log(2 * np.pi))
    assert obj.mll == pytest.approx(expected, rel=1e-12)


def _small(rng):
    g, y = _data(rng, 3, 4, 2)
    sg, ys, _ = standardize(g, y)
    return sg, ys, np.log([0.05, 0.4, 0.2]), np.log([1.1, 0.9, 1.3])


def test_objective_against_dense(rng):
    sg, ys, z, lam = _small(rng)
    cfg = GprConfig(noise=1e-2, cg_tol=1e-10, n_probes=35)
    obj = objective_and_gradient(sg, sg.mcr, ys, z, lam, cfg)
    k = assemble(sg, None, np.exp(z), np.exp(lam))
    ref = dense_gpr(dense_pairwise(sg, k), 1e-2, ys)
    assert abs(obj.logdet - ref.logdet) <= 3 * obj.logdet_sem
    assert np.linalg.norm(obj.alpha - ref.alpha) <= 1e-7 * np.linalg.norm(ref.alpha)
    # deterministic piece: alpha^T dK alpha
    q = quadratic_terms(k, obj.alpha, obj.alpha)
    dq = [ref.alpha @ dense_dK(sg, k, parse_theta(k, t)) @ ref.alpha for t in range(n_theta(k) - 1)]
    np.testing.assert_allclose(q[:-1], dq, rtol=1e-6)


def test_objective_gradient_within_sem(rng):
    sg, ys, z, lam = _small(rng)
    cfg = GprConfig(noise=1e-2, cg_tol=1e-10)
    obj = objective_and_gradient(sg, sg.mcr, ys, z, lam, cfg)
    _, dg = dense_objective(sg, sg.mcr, ys, z, lam, 1e-2)
    raw = np.exp(np.concatenate([z, lam]))
    sem = 0.5 * raw * obj.trace_sem / sg.total
    assert np.all(np.abs(obj.grad - dg) <= 3 * sem + 1e-10)


def test_dense_objective_fd(rng):
    # [DERIVED] central FD on the dense path, per log-parameter
    sg, ys, z, lam = _small(rng)
    p = np.concatenate([z, lam])
    v, g = dense_objective(sg, sg.mcr, ys, z, lam, 1e-2)
    h = 1e-5
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        fp = dense_objective(sg, sg.mcr, ys, (p + e)[:3], (p + e)[3:], 1e-2)[0]
        fm = dense_objective(sg, sg.mcr, ys, (p - e)[:3], (p - e)[3:], 1e-2)[0]
        assert g[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-9)


def test_adam_first_step_is_lr_sign():
    opt = Adam(3, lr=0.1)
    np.testing.assert_allclose(opt.step(np.array([2.0, -0.5, 1e-3])), [0.1, -0.1, 0.1], rtol=1e-4)


# -- fit and prediction -----------------------------------------------------


def test_fit_zero_gradient_tolerance_stops_immediately(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(grad_tol=1e9))
    assert m.converged and m.diagnostics["cycles"] == 1


def test_fit_without_optimization_keeps_initial(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(optimize=False))
    sg, _, _ = standardize(g, y)
    s2, ell = initial_hyperparameters(sg, 2)
    np.testing.assert_allclose(m.sigma2, s2)
    np.testing.assert_allclose(m.ell, ell)
    assert m.diagnostics["cycles"] == 0


def test_fit_small_problem(rng):
    g, y = _data(rng, 3, 5, 2)
    m = fit(g, y, GprConfig(max_cycles=60, noise=1e-3))
    d = m.diagnostics
    assert d["cycles"] == len(d["grad_norm"]) == len(d["objective"])
    assert d["grad_norm"][-1] < d["grad_norm"][0]
    assert np.mean(d["objective"][-10:]) > np.mean(d["objective"][:10])
    assert m.residual(y) <= 10 * m.config.cg_tol


def _dense_predictions(m, X):
    k = m.kernel
    Xs = m.stats.inputs(X)
    K = dense_pairwise(k.grid, k).matrix
    idx = k.grid.index_matrix()
    Kx = np.zeros((k.grid.total, X.shape[0]))
    kxx = np.zeros(X.shape[0])
    for j in range(k.omega + 1):
        for mc in k.mcr.order_array(j):
            t = np.full(Kx.shape, k.sigma2[j])
            tt = np.full(X.shape[0], k.sigma2[j])
            for mm in mc:
                t *= k.cross_base(mm, Xs[:, mm])[idx[:, mm]]
                tt *= k.test_diag_base(mm, Xs[:, mm])
            Kx += t
            kxx += tt
    ys = m.stats.outputs(m._y)
    r = dense_gpr(K, m.noise, ys, K_star=Kx, K_starstar=kxx)
    return m.stats.restore_outputs(r.mean), r.var * m.stats.y_scale**2, kxx * m.stats.y_scale**2


def test_predictions_match_dense(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(optimize=False, noise=1e-2)).refit_weights(y, tol=1e-13)
    m._y = y
    X = rng.uniform(-2, 2, (7, 3))
    mean_ref, var_ref, prior = _dense_predictions(m, X)
    np.testing.assert_allclose(m.predict_mean(X), mean_ref, rtol=1e-8, atol=1e-8 * np.abs(y).max())
    var, flag = m.predict_variance(X, tol=1e-13)
    np.testing.assert_allclose(var, var_ref, rtol=1e-6, atol=1e-10)
    assert np.all(var <= prior + 1e-8)


def test_interpolation_at_tiny_noise(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(optimize=False, noise=1e-3)).refit_weights(y, noise=1e-10, tol=1e-12, max_iters=5000)
    span = y.max() - y.min()
    assert np.abs(m.predict_mean(g.coordinates()) - y).max() <= 1e-4 * span


def test_sigma0_only_model_is_constant(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(optimize=False), kernel_mcr=build_simple_mcr(3, 0))
    pred = m.predict_mean(rng.uniform(-2, 2, (6, 3)))
    np.testing.assert_allclose(pred, pred[0], rtol=1e-12)
    expected = m.stats.restore_outputs(m.sigma2[0] * m.weights.sum())
    assert pred[0] == pytest.approx(expected, rel=1e-12)


def test_output_scaling_equivariance(rng):
    # noise lives in standardized units, so scaling y by c scales the predictions by c
    g, y = _data(rng)
    cfg = GprConfig(max_cycles=5)
    X = rng.uniform(-2, 2, (5, 3))
    p1 = fit(g, y, cfg).predict_mean(X)
    p2 = fit(g, 7.5 * y, cfg).predict_mean(X)
    np.testing.assert_allclose(p2, 7.5 * p1, rtol=1e-10)


def test_prediction_input_check(rng):
    g, y = _data(rng)
    m = fit(g, y, GprConfig(optimize=False))
    with pytest.raises(Exception):
        m.predict_mean(np.zeros((2, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        GprConfig(noise=0)
    with pytest.raises(ValueError):
        GprConfig(n_probes=1)
    assert GprConfig(prior={"gamma_scale": 0.2}).prior.gamma_scale == 0.2
    d = GprConfig().to_dict()
    assert (d["rank"], d["n_probes"], d["lr"], d["cg_tol"], d["grad_tol"], d["noise"]) == (10, 35, 0.1, 1e-3, 1e-3, 1e-3)
