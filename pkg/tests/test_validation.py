import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artifact.grid import GridError, GridShape, IncompleteGrid, ModeCombinationRange, build_simple_mcr
from artifact.validation import check_points, check_positive, check_targets, infer_grid, match_points


def _grid(rng, n=(4, 3, 5), alpha=2):
    grids = [rng.permutation(np.arange(k, dtype=float)) * 0.5 - 1 for k in n]
    return IncompleteGrid(GridShape(grids), build_simple_mcr(len(n), alpha))


def test_check_points():
    assert check_points([1.0, 2.0], D=2).shape == (1, 2)
    with pytest.raises(ValueError):
        check_points(np.zeros((2, 3)), D=2)
    with pytest.raises(ValueError):
        check_points(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        check_points(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        check_points(np.zeros(3))


def test_check_targets_and_positive():
    assert check_targets([[1.0], [2.0]], 2).shape == (2,)
    with pytest.raises(ValueError):
        check_targets([1.0], 2)
    with pytest.raises(ValueError):
        check_targets([np.inf, 1.0], 2)
    with pytest.raises(ValueError):
        check_positive("noise", 0.0)
    assert check_positive("noise", 2) == 2.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.lists(st.integers(2, 4), min_size=2, max_size=4), data=st.data())
def test_infer_grid_recovers_shuffled_grid(seed, n, data):
    # alpha < D: in a complete grid every value is equally frequent and the reference is not identifiable
    rng = np.random.default_rng(seed)
    alpha = data.draw(st.integers(1, len(n) - 1))
    g = _grid(rng, n, alpha)
    X = g.coordinates()
    perm = rng.permutation(g.total)
    g2, order = infer_grid(X[perm])
    assert g2.mcr == g.mcr
    np.testing.assert_array_equal(g2.coordinates()[order], X[perm])
    # references agree; the displaced values come back sorted
    for m in range(len(n)):
        assert g2.shape.grids_1d[m][0] == g.shape.grids_1d[m][0]
        np.testing.assert_array_equal(g2.shape.grids_1d[m][1:], np.sort(g.shape.grids_1d[m][1:]))


def test_infer_grid_non_simple_range(rng):
    mcr = ModeCombinationRange(3, [(), (0,), (1,), (2,), (1, 2)])
    g = IncompleteGrid(GridShape([np.arange(3.0), np.arange(4.0), np.arange(3.0)]), mcr)
    g2, _ = infer_grid(g.coordinates())
    assert g2.mcr == mcr


def test_infer_grid_errors(rng):
    g = _grid(rng)
    X = g.coordinates()
    with pytest.raises(GridError, match="repeat"):
        infer_grid(np.vstack([X, X[5]]))
    with pytest.raises(GridError, match="missing"):
        infer_grid(np.delete(X, -1, axis=0))
    with pytest.raises(GridError, match="equally frequent"):
        infer_grid(np.array([[0.0], [1.0]]))


def test_match_points(rng):
    g = _grid(rng)
    X = g.coordinates()
    idx = match_points(g, X[[3, 0, 7]] + 1e-12, atol=1e-9)
    assert idx.tolist() == [3, 0, 7]
    assert match_points(g, X[[3]] + 0.1, atol=1e-9)[0] == -1
