import json
import math

import numpy as np
import pytest

from fracnull.control import (
    ControlFunction,
    MomentProblem,
    explicit_control,
    hstar_flag,
    hstar_norm,
    moment_solve,
    verify_steering,
)
from fracnull.errors import ConvergenceError, GridMismatchError, InvalidInputError
from fracnull.grid import Grid
from fracnull.spectral import build_model, heat_dirichlet


def test_explicit_control_steers_to_zero():
    m = heat_dirichlet(6, 0.5)
    x = 1.0 / np.arange(1, 7)
    u = explicit_control(m, x)
    assert verify_steering(m, x, u) < 1e-12


def test_explicit_control_l2_norm():
    m = build_model([2.0], [4.0], 0.5, 1.0)
    u = explicit_control(m, [3.0])
    coef = -3.0 / 2.0
    exact = abs(coef) * math.sqrt((1 - math.exp(-4.0)) / 4.0)
    assert u.norm_l2 == pytest.approx(exact, rel=1e-12)


def test_explicit_control_rejects_unsteerable_mode():
    m = build_model([1.0, 2.0], [1.0, 0.0], 0.5, 1.0, allow_zero_noise=True)
    with pytest.raises(InvalidInputError):
        explicit_control(m, [1.0, 1.0])
    with pytest.raises(GridMismatchError):
        explicit_control(m, [1.0])


def test_brownian_hstar_equals_l2():
    m = heat_dirichlet(32, 0.5)
    u = hstar_norm(0.5, explicit_control(m, np.ones(32)))
    assert u.norm_hstar == pytest.approx(u.norm_l2, rel=1e-12)
    assert u.hstar_flag == "finite"


@pytest.mark.parametrize("beta", [0.3, 0.75])
def test_scaling_law_matches_time_refinement(beta):
    g = Grid(1.0, 2048)
    m = build_model([3.0], [1.0], beta, 1.0)
    u = explicit_control(m, [1.0], grid=g)
    by_modes = hstar_norm(beta, u).norm_hstar
    coef = u.exp_modes[0][0]
    plain = ControlFunction.from_callable(g, lambda t: coef * np.exp(-3.0 * t))
    by_time = hstar_norm(beta, plain).norm_hstar
    assert by_modes == pytest.approx(by_time, rel=1e-2)


def test_power_singularity_is_flagged_divergent():
    g = Grid(1.0, 4096)
    u = ControlFunction.from_callable(g, lambda t: t**-0.4)
    assert u.norm_l2 == pytest.approx(math.sqrt(1 / 0.2), rel=1e-6)
    u = hstar_norm(0.75, u)
    assert u.divergent


def test_flag_rule():
    assert hstar_flag([(0, 1.0), (1, 1.5), (2, 1.52)]) == "finite"
    assert hstar_flag([(0, 1.0), (1, 1.5), (2, 2.1)]) == "divergent"
    assert hstar_flag([(0, 1.0), (1, 1.3), (2, 1.6)]) == "divergent"
    assert hstar_flag([(0, 1.0), (1, 1.4), (2, 1.55)]) == "inconclusive"
    assert hstar_flag([(0, 1.0), (1, np.inf), (2, 1.0)]) == "divergent"


def test_hstar_needs_source():
    g = Grid(1.0, 64)
    u = ControlFunction.from_callable(g, lambda t: t)
    bare = ControlFunction(g, u.values, u.norm_l2)
    with pytest.raises(InvalidInputError):
        hstar_norm(0.7, bare)


def test_single_constraint_moment_problem():
    lam, c, T = 2.0, 0.5, 1.0
    sol = moment_solve(MomentProblem([lam], [c], T, 1, ridge=0.0))
    gram = (1 - math.exp(-2 * lam * T)) / (2 * lam)
    assert sol.coefficients[0] == pytest.approx(lam * c / gram, rel=1e-12)
    # u0' = h
    t = np.array([0.2, 0.7])
    eps = 1e-6
    deriv = (sol.u0(t + eps) - sol.u0(t - eps)) / (2 * eps)
    assert np.allclose(deriv, sol.h(t), rtol=1e-6)
    doc = json.loads(sol.to_json())
    assert doc["n_trunc"] == 1 and doc["max_residual"] < 1e-12


def test_moment_problem_validation():
    with pytest.raises(InvalidInputError):
        MomentProblem([2.0, 1.0], [1.0, 1.0], 1.0, 2)
    with pytest.raises(InvalidInputError):
        MomentProblem([1.0, 2.0], [1.0], 1.0, 1)
    with pytest.raises(InvalidInputError):
        MomentProblem([1.0, 2.0], [1.0, 1.0], 1.0, 3)
    with pytest.raises(InvalidInputError):
        MomentProblem([1.0], [1.0], 1.0, 1, ridge=-1.0)


def test_ill_conditioned_without_ridge_fails():
    n = np.arange(1, 41, dtype=float)
    p = MomentProblem(n**2, 1.0 / n, 1.0, 40, ridge=0.0)
    with pytest.raises(ConvergenceError):
        moment_solve(p)
    # the default ridge gets through
    sol = moment_solve(MomentProblem(n**2, 1.0 / n, 1.0, 40))
    assert sol.ridge > 0


@pytest.mark.parametrize("beta", [0.25, 0.5, 0.75])
def test_smooth_antiderivative_control_has_stable_norm(beta):
    lam = np.pi**2 * np.arange(1, 5) ** 2
    sol = moment_solve(MomentProblem(lam, 1.0 / np.arange(1, 5), 1.0, 4), n_steps=2048)
    u = hstar_norm(beta, sol.control)
    assert u.hstar_flag == "finite"
    assert np.isfinite(u.norm_hstar) and u.norm_hstar > 0
