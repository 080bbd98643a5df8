import json

import numpy as np
import pytest

from fracnull.errors import InvalidInputError
from fracnull.fractional import kbig_power_coefficient
from fracnull.girsanov import (
    NonlinearityG,
    classical_density,
    densities,
    densities_to_csv,
    drift_transform,
    linear_nonlinearity,
    nemytskii,
    report_json,
    simulate_semilinear,
    strong_feller_probe,
    transfer_check,
)
from fracnull.grid import Grid, GridFunction
from fracnull.spectral import build_model, heat_dirichlet, simulate_ou


def _model(beta, n=3):
    return build_model(np.arange(1, n + 1, dtype=float), np.ones(n), beta, 1.0)


def test_zero_nonlinearity_has_unit_density():
    m = _model(0.3)
    ens = simulate_ou(m, Grid(1.0, 64), np.ones(3), 5, seed=1)
    d = densities(nemytskii(m, "zero"), ens)
    assert np.all(d["log_rho"] == 0.0)


def test_zero_nonlinearity_reproduces_linear_paths():
    m = _model(0.7)
    g = Grid(1.0, 64)
    x = np.array([1.0, -0.5, 0.2])
    ens = simulate_ou(m, g, x, 6, seed=4)
    sl, alive = simulate_semilinear(m, linear_nonlinearity(m, 0.0), x, g, seed=4, n_paths=6)
    assert np.array_equal(ens.paths, sl.paths)
    assert alive.all()


def test_linear_drift_shifts_the_mean():
    m = build_model([1.0], [1.0], 0.5, 1.0)
    g = Grid(1.0, 200)
    c = 0.7
    ens, _ = simulate_semilinear(m, linear_nonlinearity(m, c), [1.0], g, seed=0, n_paths=4000)
    zT = ens.paths[:, 0, -1]
    se = zT.std(ddof=1) / np.sqrt(len(zT))
    assert abs(zT.mean() - np.exp(-(1.0 + c))) < 4 * se


@pytest.mark.parametrize("beta", [0.3, 0.7])
def test_drift_transform_of_constant_drift(beta):
    # G = 1 gives psi(t) = t, whose preimage is a power function
    g = Grid(1.0, 256)
    one = NonlinearityG(lambda x: np.ones_like(np.asarray(x, float)), 0.0, 1.0, 1.0, "one")
    v = drift_transform(beta, one, GridFunction(g, np.zeros((1, 257))))
    t = g.nodes[1:]
    exact = t ** (0.5 - beta) / kbig_power_coefficient(beta, 0.5 - beta)
    assert np.allclose(v.values[0, 1:], exact, rtol=1e-9)


def test_classical_density_matches_general_formula():
    m = _model(0.5)
    ens = simulate_ou(m, Grid(1.0, 128), np.ones(3), 8, seed=2)
    G = nemytskii(m, "sin")
    assert np.allclose(densities(G, ens)["log_rho"], classical_density(G, ens), atol=1e-10)
    with pytest.raises(InvalidInputError):
        classical_density(G, simulate_ou(_model(0.3), Grid(1.0, 64), np.ones(3), 2, seed=0))


def test_density_csv():
    m = _model(0.5)
    d = densities(nemytskii(m, "sin"), simulate_ou(m, Grid(1.0, 64), np.ones(3), 3, seed=0))
    lines = densities_to_csv(d).splitlines()
    assert lines[0] == "path_id,log_rho,ito_term,quadratic_term" and len(lines) == 4


def test_declared_constants_are_checked():
    m = heat_dirichlet(4, 0.75)
    nemytskii(m, "sin").check(0.75, 4)
    liar = NonlinearityG(lambda x: 3 * np.asarray(x), 1.0, 1.0, 1.0, "liar")
    with pytest.raises(InvalidInputError):
        liar.check(0.3, 4)
    with pytest.raises(InvalidInputError):
        NonlinearityG(lambda x: x, 1.0, holder_alpha=0.0)
    with pytest.raises(InvalidInputError):
        nemytskii(m, "cubic")


def test_transfer_check_trivial_cases():
    m = _model(0.3, 2)
    zero = transfer_check(m, nemytskii(m, "zero"), [0.5, 0.5], n_paths=200, n_steps=64)
    for f in zero["functionals"]:
        assert f["lhs"] == f["rhs"]
    const = (type("One", (), {"name": "one", "__call__": lambda self, z: np.ones(len(z))})(),)
    rep = transfer_check(m, nemytskii(m, "sin"), [0.5, 0.5], phis=const, n_paths=200, n_steps=64)
    assert rep["functionals"][0]["lhs"] == 1.0
    assert json.loads(report_json(rep))["n_paths"] == 200


def test_strong_feller_probe_zero_direction():
    m = _model(0.7, 2)
    rep = strong_feller_probe(m, nemytskii(m, "sin"), [0.3, 0.3], [0.0, 0.0], levels=3, n_paths=100, n_steps=64)
    assert rep["mean_abs_drho"] == [0.0, 0.0, 0.0]
    assert rep["offsets"] == [1.0, 0.5, 0.25]
