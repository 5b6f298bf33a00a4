import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.fastmvp import (
    OneModeBlocks,
    cross_column,
    cross_columns,
    cross_dot,
    kernel_column,
    kernel_columns,
    kernel_diagonal,
    mvp_C,
    mvp_dC,
    mvp_K,
    mvp_L,
    mvp_M,
    mvp_U,
    n_theta,
    one_mode_contract,
    parse_theta,
    prior_variance_at,
    quadratic_terms,
)
from artifact.grid import GridError, GridShape, IncompleteGrid, McrTensor, ModeCombinationRange, build_simple_mcr
from artifact.kernel import KernelError, assemble, lower_factor
from artifact.oracle import (
    chop,
    complete_indices,
    dense_bracket_product,
    dense_chopped_kronecker,
    dense_dK,
    dense_L,
    dense_pairwise,
    dense_U,
)

from conftest import random_grid, random_kernel, rel_err


def _chopped_bracket(grid, m, A):
    factors = [A if j == m else np.eye(grid.n[j]) for j in range(grid.D)]
    pos = complete_indices(grid)
    return chop(dense_bracket_product(factors), pos)


# -- one-mode contraction ---------------------------------------------------


def test_one_mode_identity_blocks(rng):
    g = random_grid(rng, 3, 3, 2)
    v = rng.standard_normal(g.total)
    w = np.zeros(g.total)
    one_mode_contract(OneModeBlocks(1, 1.0, np.zeros(2), np.zeros(2), np.eye(2)), v, w, g)
    np.testing.assert_array_equal(w, v)


def test_one_mode_1d_dense(rng):
    g = IncompleteGrid(GridShape.from_sizes([3]), build_simple_mcr(1, 1))
    A = rng.standard_normal((3, 3))
    v = rng.standard_normal(3)
    w = np.zeros(3)
    one_mode_contract(OneModeBlocks.from_matrix(0, A), v, w, g)
    np.testing.assert_allclose(w, A @ v, rtol=1e-14)


@pytest.mark.parametrize("m", [0, 1, 2])
def test_one_mode_chopped_oracle(rng, m):
    # [DERIVED] explicit chopping of the 27-point complete grid
    g = IncompleteGrid(GridShape.from_sizes([3, 3, 3]), build_simple_mcr(3, 2))
    A = rng.standard_normal((3, 3))
    v = rng.standard_normal(g.total)
    w = McrTensor(g)
    one_mode_contract(OneModeBlocks.from_matrix(m, A), McrTensor(g, v), w)
    assert rel_err(np.asarray(w), _chopped_bracket(g, m, A) @ v) < 1e-13


def test_one_mode_accumulates_and_checks(rng):
    g = random_grid(rng, 2, 3, 1)
    blocks = OneModeBlocks.from_matrix(0, np.eye(3))
    v = rng.standard_normal(g.total)
    w = v.copy()
    one_mode_contract(blocks, v, w, g)
    np.testing.assert_allclose(w, 2 * v)
    with pytest.raises(GridError):
        one_mode_contract(OneModeBlocks.from_matrix(5, np.eye(3)), v, w, g)
    other = random_grid(rng, 2, 3, 1)
    with pytest.raises(GridError):
        one_mode_contract(blocks, McrTensor(g, v), McrTensor(other), None)


# -- L and U ----------------------------------------------------------------


def test_L_U_1d_examples():
    g = IncompleteGrid(GridShape.from_sizes([3]), build_simple_mcr(1, 1))
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(mvp_L(g, v), [1, 3, 4])
    np.testing.assert_array_equal(mvp_U(g, v), [6, 2, 3])


@pytest.mark.parametrize("method", ["fast", "modewise"])
def test_L_U_dense(rng, method):
    g = IncompleteGrid(GridShape.from_sizes([4, 4, 4, 4]), build_simple_mcr(4, 2))
    v = rng.standard_normal(g.total)
    assert rel_err(mvp_L(g, v, method=method), dense_L(g) @ v) < 1e-14
    assert rel_err(mvp_U(g, v, method=method), dense_U(g) @ v) < 1e-14


def test_L_is_product_of_brackets(rng):
    g = IncompleteGrid(GridShape.from_sizes([3, 4, 2]), build_simple_mcr(3, 2))
    P = np.eye(g.total)
    for m in range(3):
        P = _chopped_bracket(g, m, lower_factor(g.n[m])) @ P
    np.testing.assert_allclose(P, dense_L(g), atol=0)


# -- M, K, C ----------------------------------------------------------------


def test_M_sigma0_only(rng):
    g = random_grid(rng, 3, 3, 2)
    k = assemble(g, build_simple_mcr(3, 0), [0.7], [1, 1, 1])
    v = rng.standard_normal(g.total)
    out = mvp_M(k, v)
    assert out[0] == pytest.approx(0.7 * v[0])
    assert not out[1:].any()


def test_M_zero_variances(rng):
    g = random_grid(rng, 3, 3, 2)
    k = assemble(g, None, [0, 0, 0], [1, 1, 1])
    assert not mvp_M(k, rng.standard_normal(g.total)).any()


def test_M_dense_oracle(rng):
    # [DERIVED] L^-1 K U^-1 with dense matrices
    g = random_grid(rng, 4, 3, 3)
    k = random_kernel(rng, g)
    Kd = dense_pairwise(g, k).matrix
    L = dense_L(g)
    M = np.linalg.solve(L, np.linalg.solve(L, Kd.T).T)
    v = rng.standard_normal(g.total)
    assert rel_err(mvp_M(k, v), M @ v) < 1e-11


def test_K_sigma0_only_is_all_ones(rng):
    g = random_grid(rng, 3, 4, 2)
    k = assemble(g, build_simple_mcr(3, 0), [0.4], [1, 1, 1])
    v = rng.standard_normal(g.total)
    np.testing.assert_allclose(mvp_K(k, v), 0.4 * v.sum() * np.ones(g.total), rtol=1e-13)


def test_K_zero_vector(rng):
    g = random_grid(rng, 3, 3, 2)
    k = random_kernel(rng, g)
    assert not mvp_K(k, np.zeros(g.total)).any()


@pytest.mark.parametrize("centered", [True, False])
@pytest.mark.parametrize("D,n,alpha", [(3, 3, 2), (4, [2, 3, 4, 3], 3), (5, 3, 2), (2, [1, 3], 2)])
def test_K_matches_oracles(rng, D, n, alpha, centered):
    g = random_grid(rng, D, n, alpha)
    k = random_kernel(rng, g, centered)
    V = rng.standard_normal((g.total, 3))
    Kd = dense_pairwise(g, k).matrix
    assert rel_err(mvp_K(k, V), Kd @ V) < 1e-12
    assert rel_err(mvp_K(k, V[:, 0]), dense_chopped_kronecker(g, k).matrix @ V[:, 0]) < 1e-12


def test_K_with_smaller_kernel_range(rng):
    g = random_grid(rng, 4, 3, 3)
    k = random_kernel(rng, g, True, build_simple_mcr(4, 1))
    v = rng.standard_normal(g.total)
    assert rel_err(mvp_K(k, v), dense_pairwise(g, k).matrix @ v) < 1e-12


def test_K_non_simple_range(rng):
    mcr = ModeCombinationRange(3, [(), (0,), (1,), (2,), (0, 1), (1, 2)])
    g = IncompleteGrid(GridShape([rng.standard_normal(k) for k in (3, 4, 3)]), mcr)
    k = assemble(g, None, [0.3, 0.5, 0.2], [0.9, 1.2, 0.6])
    v = rng.standard_normal(g.total)
    assert rel_err(mvp_K(k, v), dense_pairwise(g, k).matrix @ v) < 1e-12


def test_C_adds_noise(rng):
    g = random_grid(rng, 3, 3, 2)
    k = random_kernel(rng, g)
    v = rng.standard_normal(g.total)
    np.testing.assert_allclose(mvp_C(k, 0.25, v), mvp_K(k, v) + 0.25 * v, rtol=1e-15)
    with pytest.raises(KernelError):
        mvp_C(k, -1.0, v)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), D=st.integers(2, 4), n=st.integers(2, 4), data=st.data())
def test_K_symmetric_and_psd(seed, D, n, data):
    alpha = data.draw(st.integers(1, D))
    rng = np.random.default_rng(seed)
    g = random_grid(rng, D, n, alpha)
    k = random_kernel(rng, g, centered=data.draw(st.booleans()))
    v, w = rng.standard_normal((2, g.total))
    a, b = v @ mvp_K(k, w), w @ mvp_K(k, v)
    assert abs(a - b) <= 1e-12 * max(abs(a), 1.0) * g.total
    assert v @ mvp_K(k, v) >= -1e-10 * (v @ v)


# -- derivative products ----------------------------------------------------


def test_dC_noise_and_absent_order(rng):
    g = random_grid(rng, 3, 3, 2)
    k = random_kernel(rng, g, True, build_simple_mcr(3, 1))
    v = rng.standard_normal(g.total)
    np.testing.assert_array_equal(mvp_dC(k, "noise", v), v)
    assert not mvp_dC(k, ("sigma2", 2), v).any()
    with pytest.raises(KernelError):
        mvp_dC(k, ("ell", 7), v)
    with pytest.raises(KernelError):
        mvp_dC(k, "bogus", v)


def test_dC_ell_fd(rng):
    # [DERIVED] central FD of the dense kernel in ell_2
    g = random_grid(rng, 3, 3, 2)
    s2 = rng.uniform(0.1, 1, 3)
    ell = rng.uniform(0.5, 2, 3)
    k = assemble(g, None, s2, ell)
    v = rng.standard_normal(g.total)
    h = 1e-5 * ell[1]
    ep, em = ell.copy(), ell.copy()
    ep[1] += h
    em[1] -= h
    fd = (dense_pairwise(g, assemble(g, None, s2, ep)).matrix - dense_pairwise(g, assemble(g, None, s2, em)).matrix) @ v / (2 * h)
    assert rel_err(mvp_dC(k, ("ell", 1), v), fd) < 1e-6


def test_dC_ell_sparsity(rng):
    # before the final L product, only members containing the mode (and their subsets) are touched
    g = random_grid(rng, 4, 3, 2)
    k = random_kernel(rng, g)
    v = rng.standard_normal(g.total)
    inner = np.linalg.solve(dense_L(g), mvp_dC(k, ("ell", 2), v))
    idx = g.index_matrix()
    outside = (idx[:, 2] == 0) & ((idx > 0).sum(axis=1) == 2)
    assert np.abs(inner[outside]).max() < 1e-13
    assert np.abs(inner[~outside]).max() > 1e-3


def test_quadratic_terms_consistency(rng):
    g = random_grid(rng, 3, [3, 4, 3], 2)
    k = random_kernel(rng, g)
    a, b = rng.standard_normal((2, g.total))
    q = quadratic_terms(k, a, b)
    ref = np.array([a @ mvp_dC(k, t, b) for t in range(n_theta(k))])
    assert rel_err(q, ref) < 1e-12
    dense = [a @ dense_dK(g, k, parse_theta(k, t)) @ b for t in range(n_theta(k) - 1)]
    assert rel_err(q[:-1], dense) < 1e-12
    assert q[-1] == pytest.approx(a @ b)
    assert quadratic_terms(k, a, a)[-1] == pytest.approx(a @ a)


def test_quadratic_terms_batched(rng):
    g = random_grid(rng, 3, 3, 2)
    k = random_kernel(rng, g)
    A, B = rng.standard_normal((2, g.total, 4))
    Q = quadratic_terms(k, A, B)
    for j in range(4):
        np.testing.assert_allclose(Q[:, j], quadratic_terms(k, A[:, j], B[:, j]), rtol=1e-12)


# -- columns, diagonal, cross terms -----------------------------------------


def test_columns_match_unit_products(rng):
    g = random_grid(rng, 4, 3, 3)
    k = random_kernel(rng, g)
    for i in rng.integers(0, g.total, 6):
        e = np.zeros(g.total)
        e[i] = 1.0
        assert rel_err(kernel_column(k, i), mvp_K(k, e)) < 1e-12
    with pytest.raises(GridError):
        kernel_column(k, g.total)


def test_sigma0_only_columns_and_diagonal(rng):
    g = random_grid(rng, 3, 3, 2)
    k = assemble(g, build_simple_mcr(3, 0), [0.6], [1, 1, 1])
    np.testing.assert_allclose(kernel_columns(k, [0, 5]), 0.6, rtol=1e-14)
    np.testing.assert_allclose(kernel_diagonal(k), 0.6, rtol=1e-14)


@pytest.mark.parametrize("centered", [True, False])
def test_diagonal_dense(rng, centered):
    g = random_grid(rng, 4, 4, 3)
    k = random_kernel(rng, g, centered)
    d, info = kernel_diagonal(k, return_info=True)
    assert not info["fallback"]
    assert rel_err(d, np.diag(dense_pairwise(g, k).matrix)) < 1e-12
    assert rel_err(kernel_diagonal(k, force_fallback=True), d) < 1e-12
    idx = rng.integers(0, g.total, 20)
    np.testing.assert_allclose(d[idx], [kernel_column(k, i)[i] for i in idx], rtol=1e-12)


def test_diagonal_degenerate_fallback(rng):
    g = random_grid(rng, 3, 3, 2)
    w = [np.eye(3)[0] for _ in range(3)]
    k = assemble(g, None, [0.5, 0.4, 0.3], [1.0, 0.8, 1.3], weights=w)
    d, info = kernel_diagonal(k, return_info=True)
    assert info["fallback"] and info["modes"] == [1, 2, 3]
    assert rel_err(d, np.diag(dense_pairwise(g, k).matrix)) < 1e-12


def test_cross_column_at_training_point(rng):
    g = random_grid(rng, 3, 4, 2)
    k = random_kernel(rng, g)
    X = g.coordinates()
    for i in (0, 3, g.total - 1):
        assert rel_err(cross_column(k, X[i]), kernel_column(k, i)) < 1e-12


def test_cross_terms_off_grid(rng):
    # [DERIVED] pairwise evaluation of the centered additive kernel at new points
    g = random_grid(rng, 3, 3, 2)
    k = random_kernel(rng, g)
    Xt = rng.standard_normal((5, 3))
    Kx = np.zeros((g.total, 5))
    Kxx = np.zeros(5)
    idx = g.index_matrix()
    for j, mc in ((j, tuple(r)) for j in range(k.omega + 1) for r in k.mcr.order_array(j)):
        t = np.full((g.total, 5), k.sigma2[j])
        tt = np.full(5, k.sigma2[j])
        for m in mc:
            t *= k.cross_base(m, Xt[:, m])[idx[:, m]]
            tt *= k.test_diag_base(m, Xt[:, m])
        Kx += t
        Kxx += tt
    assert rel_err(cross_columns(k, Xt), Kx) < 1e-12
    w = rng.standard_normal(g.total)
    assert rel_err(cross_dot(k, w, Xt), Kx.T @ w) < 1e-12
    assert rel_err(prior_variance_at(k, Xt), Kxx) < 1e-12
