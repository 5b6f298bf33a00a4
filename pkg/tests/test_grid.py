import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.grid import (
    GridError,
    GridOverflowError,
    GridShape,
    IncompleteGrid,
    McrTensor,
    ModeCombinationRange,
    build_simple_mcr,
    grid_size,
    validate_cuts,
)


def _brute_count(D, n, alpha):
    return sum(1 for p in itertools.product(range(n), repeat=D) if sum(i > 0 for i in p) <= alpha)


# -- build_simple_mcr -------------------------------------------------------


def test_simple_mcr_d3_a2():
    # [PAPER] listed grid range for D=3, alpha=2
    assert build_simple_mcr(3, 2).to_list() == [[], [0], [1], [2], [0, 1], [0, 2], [1, 2]]


def test_simple_mcr_reference_only():
    assert build_simple_mcr(5, 0).to_list() == [[]]


def test_simple_mcr_power_set():
    mcr = build_simple_mcr(4, 4)
    assert len(mcr) == 16
    assert {tuple(m) for m in mcr.to_list()} == {
        c for k in range(5) for c in itertools.combinations(range(4), k)
    }


@pytest.mark.parametrize("D,alpha", [(3, 4), (0, 0), (2, -1)])
def test_simple_mcr_invalid(D, alpha):
    with pytest.raises(GridError):
        build_simple_mcr(D, alpha)


# -- validate_cuts ----------------------------------------------------------


def test_validate_cuts_ok():
    assert validate_cuts([(), (0,), (1,), (0, 1)]).ok


def test_validate_cuts_violation_reports_missing():
    rep = validate_cuts([(), (0, 1)])
    assert not rep.ok
    assert rep.missing == (0,)
    assert "(1)" in str(rep)


def test_validate_cuts_simple_exhaustive():
    # [DERIVED] enumerate every subset of every member
    mcr = build_simple_mcr(8, 3)
    members = set(mcr)
    for mc in members:
        for k in range(len(mc)):
            for sub in itertools.combinations(mc, k):
                assert sub in members
    assert validate_cuts(mcr).ok


def test_mcr_constructor_rejects_non_cuts():
    with pytest.raises(GridError, match="missing"):
        ModeCombinationRange(3, [(), (0,), (0, 1)])


def test_mcr_rejects_duplicates_and_unsorted():
    with pytest.raises(GridError):
        ModeCombinationRange(2, [(), (0,), (0,)])
    with pytest.raises(GridError):
        ModeCombinationRange(2, [(), (0,), (1,), (1, 0)])


def test_canonical_order_is_idempotent():
    mcr = ModeCombinationRange(4, [(1, 2), (), (2,), (0,), (1,), (3,), (0, 3)])
    again = ModeCombinationRange(4, mcr.to_list())
    assert again.to_list() == mcr.to_list()
    assert mcr.to_list() == [[], [0], [1], [2], [3], [0, 3], [1, 2]]


# -- grid_size --------------------------------------------------------------


@pytest.mark.parametrize(
    "D,alpha,n,expected",
    [(16, 2, 5, 1985), (16, 3, 10, 418105), (16, 4, 5, 503745), (24, 3, 7, 447265)],
)
def test_grid_size_published(D, alpha, n, expected):
    # [PAPER] benchmark table rows and the 24-mode application size
    assert grid_size(build_simple_mcr(D, alpha), [n] * D) == expected


def test_grid_size_closed_form():
    # [DERIVED] binomial sum
    for D, n, a in [(7, 4, 3), (10, 6, 2)]:
        assert grid_size(build_simple_mcr(D, a), [n] * D) == sum(comb(D, k) * (n - 1) ** k for k in range(a + 1))


@pytest.mark.parametrize("D", [1, 4, 9])
def test_grid_size_alpha0(D):
    assert grid_size(build_simple_mcr(D, 0), [5] * D) == 1


@settings(max_examples=60, deadline=None)
@given(D=st.integers(1, 6), n=st.integers(1, 5), data=st.data())
def test_grid_size_matches_brute_force(D, n, data):
    alpha = data.draw(st.integers(0, D))
    assert grid_size(build_simple_mcr(D, alpha), [n] * D) == _brute_count(D, n, alpha)


def test_grid_size_mixed_sizes():
    mcr = build_simple_mcr(3, 2)
    n = [2, 3, 4]
    brute = sum(1 for p in itertools.product(*[range(k) for k in n]) if sum(i > 0 for i in p) <= 2)
    assert grid_size(mcr, n) == brute


def test_grid_size_overflow():
    with pytest.raises(GridOverflowError):
        grid_size(build_simple_mcr(8, 8), [1000] * 8)


# -- flat indexing ----------------------------------------------------------


def test_flat_index_reference_is_zero():
    g = IncompleteGrid(GridShape.from_sizes([3, 3, 3]), build_simple_mcr(3, 2))
    assert g.flat_index(()) == 0


def test_flat_index_first_mode():
    # [DERIVED] canonical order: (), (1)[a=1], (1)[a=2], (2)...
    g = IncompleteGrid(GridShape.from_sizes([3, 3, 3]), build_simple_mcr(3, 2))
    assert g.flat_index((0,), (1,)) == 1
    assert g.flat_index((1,), (1,)) == 3
    assert g.flat_index((0, 1), (1, 1)) == 7
    assert g.total == 19


def test_flat_index_errors():
    g = IncompleteGrid(GridShape.from_sizes([3, 3, 3]), build_simple_mcr(3, 1))
    with pytest.raises(GridError):
        g.flat_index((0, 1), (1, 1))
    with pytest.raises(GridError):
        g.flat_index((0,), (3,))
    with pytest.raises(GridError):
        g.multi_index(g.total)


@settings(max_examples=30, deadline=None)
@given(
    n=st.lists(st.integers(1, 4), min_size=1, max_size=5),
    data=st.data(),
)
def test_flat_index_round_trip(n, data):
    alpha = data.draw(st.integers(0, len(n)))
    g = IncompleteGrid(GridShape.from_sizes(n), build_simple_mcr(len(n), alpha))
    for i in range(g.total):
        mc, a = g.multi_index(i)
        assert g.flat_index(mc, a) == i
    np.testing.assert_array_equal(g.flat_indices(g.index_matrix()), np.arange(g.total))


def test_flat_indices_off_grid():
    g = IncompleteGrid(GridShape.from_sizes([3, 3, 3]), build_simple_mcr(3, 1))
    out = g.flat_indices([[1, 1, 0], [0, 0, 3], [0, 2, 0]])
    assert out.tolist() == [-1, -1, g.flat_index((1,), (2,))]


# -- coordinates ------------------------------------------------------------


def test_enumerate_coordinates_complete_2x2():
    g = IncompleteGrid(GridShape([[0.0, 1.0], [0.0, 1.0]]), build_simple_mcr(2, 2))
    recs = list(g.enumerate_coordinates())
    assert [i for i, _ in recs] == [0, 1, 2, 3]
    np.testing.assert_array_equal(np.array([x for _, x in recs]), [[0, 0], [1, 0], [0, 1], [1, 1]])


def test_enumerate_reference_and_count():
    grids = [[0.5, 1.0, 2.0], [-1.0, 3.0], [7.0, 8.0, 9.0, 10.0]]
    g = IncompleteGrid(GridShape(grids), build_simple_mcr(3, 2))
    recs = list(g.enumerate_coordinates(chunk=5))
    assert len(recs) == grid_size(g.mcr, g.n)
    np.testing.assert_array_equal(recs[0][1], [0.5, -1.0, 7.0])


def test_coordinates_undisplaced_modes_hold_reference(rng):
    grids = [rng.standard_normal(4) for _ in range(4)]
    g = IncompleteGrid(GridShape(grids), build_simple_mcr(4, 2))
    X = g.coordinates()
    idx = g.index_matrix()
    for m in range(4):
        np.testing.assert_array_equal(X[idx[:, m] == 0, m], grids[m][0])
        assert np.all((idx > 0).sum(axis=1) <= 2)


def test_coordinate_windows_agree(rng):
    g = IncompleteGrid(GridShape.from_sizes([4, 3, 5, 2]), build_simple_mcr(4, 3))
    full = g.coordinates()
    parts = np.vstack([g.coordinates(s, s + 7) for s in range(0, g.total, 7)])
    np.testing.assert_array_equal(parts, full)


def test_value_frequency_uniform_for_simple_mcr():
    g = IncompleteGrid(GridShape.from_sizes([4, 4, 4, 4]), build_simple_mcr(4, 2))
    idx = g.index_matrix()
    for m in range(4):
        counts = np.bincount(idx[:, m], minlength=4)
        assert len(set(counts[1:].tolist())) == 1
        assert counts[0] > counts[1]


# -- McrTensor --------------------------------------------------------------


def test_mcr_tensor_round_trip(rng):
    g = IncompleteGrid(GridShape.from_sizes([3, 4, 2]), build_simple_mcr(3, 2))
    v = rng.standard_normal(g.total)
    t = McrTensor(g, v.copy())
    parts = {mc: sub.copy() for mc, sub in t.items()}
    assert parts[(0, 1)].shape == (2, 3)
    back = McrTensor.from_subtensors(g, parts)
    np.testing.assert_array_equal(np.asarray(back), v)


def test_mcr_tensor_size_check():
    g = IncompleteGrid(GridShape.from_sizes([3, 3]), build_simple_mcr(2, 1))
    with pytest.raises(GridError):
        McrTensor(g, np.zeros(4))
