import csv
import io
import json
import math

import numpy as np
import pytest

from fracnull.errors import GridMismatchError, InvalidInputError
from fracnull.grid import Grid
from fracnull.noise import sample_fbm_kernel
from fracnull.spectral import (
    build_model,
    covariance_qn,
    empirical_covariance,
    equivalence_report,
    heat_dirichlet,
    holder_exponent,
    order_2m,
    simulate_ou,
    order_2m_condition,
)


def test_build_model_collects_all_problems():
    with pytest.raises(InvalidInputError) as exc:
        build_model([2.0, 1.0], [1.0, -1.0], 1.5, -1.0)
    msg = str(exc.value)
    for part in ("nondecreasing", "positive", "T must be"):
        assert part in msg


def test_zero_noise_needs_opt_in():
    with pytest.raises(InvalidInputError):
        build_model([1.0], [0.0], 0.5, 1.0)
    m = build_model([1.0], [0.0], 0.5, 1.0, allow_zero_noise=True)
    assert covariance_qn(m, 1) == 0.0


def test_model_is_frozen():
    m = heat_dirichlet(3, 0.5)
    with pytest.raises(ValueError):
        m.alphas[0] = 1.0
    assert m.semigroup(0.0).tolist() == [1.0, 1.0, 1.0]


def test_order_2m_condition():
    assert order_2m_condition(1, 1, 0.3)
    assert not order_2m_condition(1, 1, 0.25)
    assert order_2m_condition(2, 3, 0.4)


@pytest.mark.parametrize("n", [1, 3])
def test_brownian_qn_closed_form(n):
    m = heat_dirichlet(3, 0.5)
    a = m.alphas[n - 1]
    exact = (1 - math.exp(-2 * a)) / (2 * a)
    assert covariance_qn(m, n) == pytest.approx(exact, rel=5e-4)


def test_qn_routes_agree():
    m = build_model([1.0, 4.0], [1.0, 2.0], 0.7, 1.0)
    for n in (1, 2):
        assert covariance_qn(m, n, route="kstar") == pytest.approx(covariance_qn(m, n, route="oracle"), rel=5e-3)
    with pytest.raises(InvalidInputError):
        covariance_qn(m, 3)


def test_ou_matches_empirical_covariance():
    m = build_model([1.0, 3.0], [1.0, 0.5], 0.5, 1.0)
    g = Grid(1.0, 256)
    ens = simulate_ou(m, g, np.zeros(2), 4000, seed=3)
    q, se = empirical_covariance(ens)
    for n in (1, 2):
        assert abs(q[n - 1] - covariance_qn(m, n)) < 4 * se[n - 1]


def test_ou_checks_dimensions():
    m = heat_dirichlet(2, 0.5)
    with pytest.raises(GridMismatchError):
        simulate_ou(m, Grid(2.0, 64), np.zeros(2), 10, seed=0)
    with pytest.raises(GridMismatchError):
        simulate_ou(m, Grid(1.0, 64), np.zeros(3), 10, seed=0)


def test_verdicts():
    assert equivalence_report(heat_dirichlet(8, 0.75)).verdict == "equivalent"
    alphas = np.arange(1, 9, dtype=float)
    singular = build_model(alphas, np.exp(-3 * alphas), 0.5, 1.0)
    assert equivalence_report(singular).verdict == "singular"
    assert equivalence_report(heat_dirichlet(3, 0.5)).verdict == "inconclusive"


def test_report_serialisation():
    rep = equivalence_report(order_2m(4, 2, 0.6))
    doc = json.loads(rep.to_json())
    assert doc["verdict"] == rep.verdict
    assert len(doc["per_mode"]) == 4
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0][0] == "n" and len(rows) == 5
    r = rep.per_mode[0]
    assert r.necsuf == pytest.approx(r.alpha ** 1.2 * math.exp(-2 * r.alpha) / r.lam)


@pytest.mark.parametrize("beta", [0.3, 0.7])
def test_holder_exponent_near_hurst(beta):
    g = Grid(1.0, 2048)
    ps = sample_fbm_kernel(beta, g, 1, 8, seed=5)
    h = holder_exponent(ps.paths, g)
    assert h.shape == (8, 1)
    assert abs(np.median(h) - beta) < 0.12
