import numpy as np
import pytest

from fracnull.errors import GridMismatchError, GridTooCoarseError, InvalidInputError
from fracnull.grid import Grid, GridFunction, HurstParameter, l2_squared, stable_matmul


def test_hurst_regimes():
    assert HurstParameter(0.25).regime == "rough"
    assert HurstParameter(0.5).is_standard
    assert HurstParameter(0.75).regime == "smooth"
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(InvalidInputError):
            HurstParameter(bad)


def test_grid_validation():
    with pytest.raises(InvalidInputError):
        Grid(0.0, 16)
    with pytest.raises(InvalidInputError):
        Grid(1.0, 0)
    with pytest.raises(GridTooCoarseError):
        Grid(1.0, 4).require_operator_resolution()
    g = Grid(2.0, 8)
    assert g.dt == 0.25 and g.nodes[-1] == 2.0 and g.refine().n_steps == 16


def test_gridfunction_is_read_only(grid64):
    f = GridFunction.from_callable(grid64, np.sin)
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


def test_mismatched_grids_rejected(grid64):
    f = GridFunction.zeros(grid64)
    with pytest.raises(GridMismatchError):
        f + GridFunction.zeros(Grid(1.0, 32))


def test_l2_trapezoid_smooth(grid64):
    f = GridFunction.from_callable(grid64, np.sin)
    exact = 0.5 - np.sin(2.0) / 4
    assert l2_squared(f)[0] == pytest.approx(exact, rel=1e-4)


def test_l2_singular_endpoint():
    # int_0^1 t^(-1/2) dt = 2 with an integrable blow-up at 0
    g = Grid(1.0, 256)
    t = g.nodes
    vals = np.empty_like(t)
    vals[1:] = t[1:] ** -0.25
    vals[0] = vals[1]
    f = GridFunction(g, vals[None, :], singular=(0.25, 0.0))
    assert l2_squared(f)[0] == pytest.approx(2.0, rel=1e-3)


def test_stable_matmul_is_batch_invariant():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((700, 40))
    M = rng.standard_normal((40, 30))
    whole = stable_matmul(X, M)
    parts = np.vstack([stable_matmul(X[:123], M), stable_matmul(X[123:], M, offset=123)])
    assert np.array_equal(whole, parts)
    assert np.allclose(whole, X @ M)
