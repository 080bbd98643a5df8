"""Riemann-Liouville operators, the fBm Volterra kernel and its transfer operators.

Everything here works on uniform grids.  Operators are assembled as dense
matrices (cached per Hurst index and grid size) and applied mode-wise, so
each discrete operator is exactly linear.

Notation: ``K(t, s)`` is the square-integrable Volterra kernel representing
fBm through a Brownian motion, ``B(t) = int_0^t K(t, s) dW(s)``;
``Kstar`` is the transfer operator whose L2 norm defines the Cameron-Martin
type space of integrands, and ``Kbig`` is the integral operator induced by
``K`` itself.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special
from scipy.linalg import solve_triangular

from .errors import GridMismatchError, InvalidInputError, NonFiniteError
from .grid import Grid, GridFunction, HurstParameter, l2_squared

__all__ = [
    "Side",
    "Kind",
    "FracOpSpec",
    "frac_apply",
    "kernel_constant",
    "kernel_K",
    "fbm_kernel",
    "fbm_kernel_dt",
    "kbig_power_coefficient",
    "apply_Kstar",
    "hnorm",
    "hnorm_oracle",
    "apply_Kbig",
    "invert_Kbig",
    "cell_integral_matrix",
]


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Kind(enum.Enum):
    INTEGRAL = "integral"
    DERIVATIVE = "derivative"


@dataclass(frozen=True)
class FracOpSpec:
    """Order, side and kind of a Riemann-Liouville operator.

    ``side=LEFT`` anchors the operator at 0, ``side=RIGHT`` at T.
    """

    alpha: float
    side: Side = Side.LEFT
    kind: Kind = Kind.INTEGRAL

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "kind", Kind(self.kind))
        a = float(self.alpha)
        if self.kind is Kind.INTEGRAL and not 0.0 < a <= 1.0:
            raise InvalidInputError(f"integral order must lie in (0, 1], got {a}")
        if self.kind is Kind.DERIVATIVE and not 0.0 < a < 1.0:
            raise InvalidInputError(f"derivative order must lie in (0, 1), got {a}")
        object.__setattr__(self, "alpha", a)


# ---------------------------------------------------------------------------
# discrete Riemann-Liouville operators (unit step; callers scale by dt**alpha)


@lru_cache(maxsize=32)
def _rl_integral_unit(alpha: float, n: int) -> np.ndarray:
    """Fractional trapezoid (product integration, piecewise-linear f) weights."""
    k = np.arange(n + 1, dtype=float)
    m = np.arange(n + 1, dtype=float)
    a1 = alpha + 1.0
    # interior weights depend on k - j only
    toe = np.zeros(n + 1)
    toe[1:] = (m[1:] + 1) ** a1 + (m[1:] - 1) ** a1 - 2 * m[1:] ** a1
    M = np.zeros((n + 1, n + 1))
    i, j = np.tril_indices(n + 1, -1)
    M[i, j] = toe[i - j]
    M[1:, 0] = (k[1:] - 1) ** a1 - (k[1:] - 1 - alpha) * k[1:] ** alpha
    M[np.arange(1, n + 1), np.arange(1, n + 1)] = 1.0
    M /= special.gamma(alpha + 2.0)
    M.setflags(write=False)
    return M


@lru_cache(maxsize=32)
def _grunwald_unit(alpha: float, n: int) -> np.ndarray:
    w = np.empty(n + 1)
    w[0] = 1.0
    for j in range(1, n + 1):
        w[j] = w[j - 1] * (1.0 - (alpha + 1.0) / j)
    i, j = np.tril_indices(n + 1)
    M = np.zeros((n + 1, n + 1))
    M[i, j] = w[i - j]
    M.setflags(write=False)
    return M


def _left_operator(spec: FracOpSpec, grid: Grid, method: str) -> np.ndarray:
    n, dt, a = grid.n_steps, grid.dt, spec.alpha
    if spec.kind is Kind.INTEGRAL:
        return _rl_integral_unit(a, n) * dt**a
    if method == "gl":
        return _grunwald_unit(a, n) * dt ** (-a)
    if method == "composition":
        # D^a = d/dt I^(1-a); second-order differences of the integral
        I = _rl_integral_unit(1.0 - a, n) * dt ** (1.0 - a)
        return np.gradient(I, dt, axis=0, edge_order=2)
    raise InvalidInputError(f"unknown derivative method {method!r}")


def operator_matrix(spec: FracOpSpec, grid: Grid, method: str = "gl") -> np.ndarray:
    """Matrix ``M`` with ``(op f)(t_k) = sum_j M[k, j] f(t_j)``."""
    M = _left_operator(spec, grid, method)
    if spec.side is Side.RIGHT:
        # reflection t -> T - t maps the left operator onto the right one
        M = M[::-1, ::-1]
    return M


def frac_apply(spec: FracOpSpec, f: GridFunction, method: str = "gl") -> GridFunction:
    """Apply a Riemann-Liouville integral or derivative mode-wise.

    Integrals use product integration of the piecewise-linear interpolant,
    which is exact for affine ``f``.  Derivatives default to Grunwald-Letnikov
    weights; ``method="composition"`` differentiates the discrete
    ``I^(1-alpha)`` instead, an independent route for cross-checks.
    """
    f.grid.require_operator_resolution()
    M = operator_matrix(spec, f.grid, method)
    out = f.values @ M.T
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("fractional operator produced non-finite values")
    return GridFunction(f.grid, out)


# ---------------------------------------------------------------------------
# the Volterra kernel


def kernel_constant(beta) -> float:
    """Normalisation making ``E|B(t)|^2 = t^(2 beta)``."""
    b = HurstParameter.coerce(beta).beta
    return math.sqrt(
        2 * b * special.gamma(1.5 - b) * special.gamma(b + 0.5) / special.gamma(2 - 2 * b)
    )


def kernel_K(beta, t: float, s: float) -> float:
    """Evaluate ``K(t, s)`` from its defining integral by adaptive quadrature.

    This is deliberately the slow, literal route (used as an oracle for
    :func:`fbm_kernel`).
    """
    b = HurstParameter.coerce(beta).beta
    t, s = float(t), float(s)
    if not 0.0 < s < t:
        raise InvalidInputError(f"kernel needs 0 < s < t, got s={s}, t={t}")
    lead = kernel_constant(b) / special.gamma(b + 0.5)
    if b == 0.5:
        return lead
    a = 0.5 - b

    def h(u):
        # (1 - (s/u)^a) / (u - s), written to avoid cancellation near u = s
        x = u - s
        if x <= 0.0:
            return a / s
        return -math.expm1(-a * math.log1p(x / s)) / x

    inner, _ = integrate.quad(
        h, s, t, weight="alg", wvar=(b - 0.5, 0.0), epsabs=0.0, epsrel=1e-12, limit=200
    )
    return lead * ((t - s) ** (b - 0.5) + (0.5 - b) * inner)


def fbm_kernel(beta, t, s) -> np.ndarray:
    """Vectorised ``K(t, s)`` (zero outside ``0 < s < t``) via Gauss hypergeometric functions."""
    b = HurstParameter.coerce(beta).beta
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    out = np.zeros(t.shape)
    ok = (s > 0) & (s < t)
    if b == 0.5:
        out[ok] = 1.0
        return out
    lead = kernel_constant(b) / special.gamma(b + 0.5)
    tt, ss = t[ok], s[ok]
    near = ss >= 0.5 * tt
    res = np.empty(tt.shape)
    tn, sn = tt[near], ss[near]
    res[near] = (tn - sn) ** (b - 0.5) * special.hyp2f1(b - 0.5, 0.5 - b, b + 0.5, 1.0 - tn / sn)
    # for s < t/2 the connection formula keeps the hypergeometric argument in (-1, 0)
    tf, sf = tt[~near], ss[~near]
    c1, c2 = _connection_constants(b)
    res[~near] = c1 * sf ** (b - 0.5) + c2 * (tf - sf) ** (2 * b - 1) * sf ** (0.5 - b) * special.hyp2f1(
        0.5 - b, 1 - 2 * b, 2 - 2 * b, -sf / (tf - sf)
    )
    out[ok] = lead * res
    return out


@lru_cache(maxsize=64)
def _connection_constants(b: float) -> tuple[float, float]:
    g = special.gamma
    c1 = g(b + 0.5) * g(1 - 2 * b) / g(0.5 - b)
    c2 = g(b + 0.5) * g(2 * b - 1) / (g(b - 0.5) * g(2 * b))
    return float(c1), float(c2)


def fbm_kernel_dt(beta, t, s) -> np.ndarray:
    """Partial derivative of ``K(t, s)`` in its first argument."""
    b = HurstParameter.coerce(beta).beta
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    out = np.zeros(t.shape)
    ok = (s > 0) & (s < t)
    lead = kernel_constant(b) / special.gamma(b + 0.5)
    out[ok] = lead * (b - 0.5) * (t[ok] / s[ok]) ** (b - 0.5) * (t[ok] - s[ok]) ** (b - 1.5)
    return out


def kbig_power_coefficient(beta, mu: float) -> float:
    """``C`` with ``int_0^t K(t, s) s^mu ds = C t^(mu + beta + 1/2)`` (``mu > -1``)."""
    b = HurstParameter.coerce(beta).beta
    return (
        kernel_constant(b)
        * special.gamma(mu + 1.5 - b)
        / (special.gamma(mu + 1.0) * (mu + b + 0.5))
    )


# ---------------------------------------------------------------------------
# quadrature helpers

_GL24 = np.polynomial.legendre.leggauss(24)
_GL4 = np.polynomial.legendre.leggauss(4)


def singular_cell_nodes(a, b, q: int = 4):
    """Nodes and weights for ``[a, b]`` with algebraic endpoint singularities.

    Each half of the interval is mapped by ``x = w**q`` towards its endpoint,
    which turns ``dist**p`` (``p > -1``) into a smooth enough integrand for
    24-point Gauss-Legendre.  ``a`` and ``b`` may be arrays; the node axis is
    the first axis of the result.  Distances to the nearest endpoint are also
    returned so callers can evaluate singular factors without cancellation.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, w = _GL24
    u = (x + 1) / 2
    h = (b - a) / 2
    shape = (len(u),) + (1,) * h.ndim
    u = u.reshape(shape)
    wq = (w / 2 * q * ((x + 1) / 2) ** (q - 1)).reshape(shape)
    dist = h * u**q
    nodes = np.concatenate([a + dist, b - dist])
    weights = np.concatenate([wq * h, wq * h]) * np.ones_like(nodes)
    left_dist = np.concatenate([dist, 2 * h - dist])
    right_dist = np.concatenate([2 * h - dist, dist])
    return nodes, weights, left_dist, right_dist


def _power_cell_moments(p: float, n: int):
    """Linear-interpolation product weights against ``x**p`` on unit cells.

    Returns arrays ``a, b`` of length ``n`` with
    ``int_m^{m+1} x^p f(x) dx ~ a[m] f(m) + b[m] f(m+1)``.
    """
    m = np.arange(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = ((m + 1) ** (p + 1) - m ** (p + 1)) / (p + 1)
        m1 = ((m + 1) ** (p + 2) - m ** (p + 2)) / (p + 2)
        a, b = (m + 1) * m0 - m1, m1 - m * m0
    if p <= -1:
        # the first cell is not integrable against x**p; callers treat it separately
        a[0] = b[0] = np.nan
    return a, b


# ---------------------------------------------------------------------------
# transfer operator Kstar


@lru_cache(maxsize=16)
def _kstar_unit(b: float, n: int) -> np.ndarray:
    """Unit-step matrix of Kstar (scale by dt**(b - 1/2))."""
    lead = kernel_constant(b) / special.gamma(b + 0.5)
    p = b - 1.5
    a_m, b_m = _power_cell_moments(p, n)
    a_m[0] = 0.0  # g vanishes at the anchor node
    b_m[0] = 1.0 / (p + 2.0)
    M = np.zeros((n + 1, n + 1))
    k = np.arange(1, n + 1)
    M[k, k] = fbm_kernel(b, float(n), k.astype(float))
    # node j = k + m collects a[m] (cell m) and b[m-1] (cell m-1)
    w_full = np.zeros(n + 1)
    w_full[1:] = b_m[:n]
    w_full[1:n] += a_m[1:n]
    kk, jj = np.triu_indices(n + 1, 1)
    sel = kk >= 1
    kk, jj = kk[sel], jj[sel]
    m = jj - kk
    coef = w_full[m].copy()
    last = jj == n
    coef[last] -= a_m[m[last]] * (m[last] < n)
    coef *= (jj / kk) ** (b - 0.5) * lead * (b - 0.5)
    M[kk, jj] = coef
    np.add.at(M, (kk, kk), -coef)
    M[0] = M[1]
    if b < 0.5:
        M[n] = M[n - 1]
    else:
        M[n] = 0.0
    M.setflags(write=False)
    return M


def _kstar_singular(b: float) -> tuple[float, float]:
    if b == 0.5:
        return (0.0, 0.0)
    return (abs(b - 0.5), 0.5 - b if b < 0.5 else 0.0)


def apply_Kstar(beta, phi: GridFunction) -> GridFunction:
    """Transfer operator applied mode-wise by product integration.

    The singular difference quotient is integrated against the exact power
    ``(s - t)^(beta - 3/2)`` on each cell.  For ``beta != 1/2`` the result
    blows up at ``t = 0`` (and at ``t = T`` when ``beta < 1/2``); those node
    values are placeholders, flagged in ``GridFunction.singular``.
    """
    b = HurstParameter.coerce(beta).beta
    grid = phi.grid
    if b == 0.5:
        return GridFunction(grid, phi.values.copy())
    grid.require_operator_resolution()
    M = _kstar_unit(b, grid.n_steps) * grid.dt ** (b - 0.5)
    out = phi.values @ M.T
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("Kstar produced non-finite values; phi is outside the operator domain")
    return GridFunction(grid, out, _kstar_singular(b))


def hnorm(beta, phi: GridFunction) -> float:
    """Norm of ``phi`` as an fBm integrand: ``||Kstar phi||_{L2(0,T;H)}``."""
    return float(np.sqrt(np.sum(l2_squared(apply_Kstar(beta, phi)))))


def _lag_products(x: np.ndarray, dt: float):
    """For piecewise-linear rows ``x``, exact lag integrals summed over modes.

    Returns ``C[m] = int_0^{T-mh} <x(s+mh), x(s)> ds`` and
    ``D[m] = int_0^{T-mh} |x(s+mh) - x(s)|^2 ds`` for ``m = 0..n``.
    """
    n = x.shape[1] - 1
    r = np.zeros(n + 2)
    for row in x:
        full = np.correlate(row, row, mode="full")
        r[: n + 1] += full[n:]
    m = np.arange(n + 1)
    x0 = x[:, 0]
    xn = x[:, n]
    s_same_lo = r[m] - np.einsum("i,ij->j", xn, x[:, n - m])
    s_same_hi = r[m] - np.einsum("i,ij->j", x0, x[:, m])
    s_cross_a = np.empty(n + 1)
    s_cross_a[0] = r[1]
    s_cross_a[1:] = r[m[1:] - 1] - np.einsum("i,ij->j", x0, x[:, m[1:] - 1])
    s_cross_b = r[m + 1]
    C = dt / 6 * (2 * s_same_lo + 2 * s_same_hi + s_cross_a + s_cross_b)
    C[n] = 0.0
    e = dt / 3 * np.sum(x[:, :-1] ** 2 + x[:, :-1] * x[:, 1:] + x[:, 1:] ** 2, axis=0)
    ce = np.concatenate([[0.0], np.cumsum(e)])
    A_hi = ce[n] - ce[m]  # cells m..n-1
    A_lo = ce[n - m]  # cells 0..n-m-1
    D = np.maximum(A_hi + A_lo - 2 * C, 0.0)
    return C, D


def hnorm_oracle(beta, phi: GridFunction) -> float:
    """Independent evaluation of the fBm-integrand norm from double integrals.

    For ``beta > 1/2`` this is the classical covariance-density form
    ``beta (2 beta - 1) int int <phi(r), phi(s)> |r - s|^(2 beta - 2)``.
    For ``beta < 1/2`` it is the Sobolev-Slobodeckij seminorm
    ``beta (1 - 2 beta)/2 int int |phi(r) - phi(s)|^2 / |r - s|^(2 - 2 beta)``
    plus the weight ``beta (r^(2 beta - 1) + (T - r)^(2 beta - 1))`` coming from
    extending ``phi`` by zero, which makes it an equality rather than an
    equivalence.  Both are evaluated exactly for the piecewise-linear
    interpolant in the lag variable, then integrated against the power weight.
    """
    b = HurstParameter.coerce(beta).beta
    if b == 0.5:
        raise InvalidInputError("the double-integral oracle is undefined at beta = 1/2; use hnorm")
    grid = phi.grid
    grid.require_operator_resolution()
    n, dt = grid.n_steps, grid.dt
    C, D = _lag_products(phi.values, dt)
    p = 2 * b - 2
    a_m, b_m = _power_cell_moments(p, n)
    scale = dt ** (p + 1)
    if b > 0.5:
        val = 2 * b * (2 * b - 1) * scale * (a_m @ C[:n] + b_m @ C[1:])
        return float(np.sqrt(val))
    # rough: D(h) ~ (h/dt)^2 D(dt) on the first lag cell
    semi = D[1] / (2 * b + 1) + a_m[1:] @ D[1:n] + b_m[1:] @ D[2:]
    semi *= scale * b * (1 - 2 * b)
    # boundary weight, product-integrated against the piecewise-linear |phi|^2
    sq = np.sum(phi.values**2, axis=0)
    q = 2 * b - 1
    wa, wb = _power_cell_moments(q, n)
    left = wa @ sq[:-1] + wb @ sq[1:]
    rsq = sq[::-1]
    right = wa @ rsq[:-1] + wb @ rsq[1:]
    bnd = b * dt ** (q + 1) * (left + right)
    return float(np.sqrt(semi + bnd))


# ---------------------------------------------------------------------------
# the operator Kbig and its inverse


def _kernel_cell_integrals(b: float, n: int) -> np.ndarray:
    """``W[k, j] = int_j^{j+1} K(k, s) ds`` on the unit grid (zero for j >= k)."""
    W = np.zeros((n + 1, n))
    if b == 0.5:
        i, j = np.tril_indices(n + 1, -1, n)
        W[i, j] = 1.0
        return W
    # regular cells: 1 <= j <= k - 2
    kk, jj = np.tril_indices(n + 1, -2, n)
    sel = jj >= 1
    kk, jj = kk[sel], jj[sel]
    x, w = _GL4
    chunk = 1 << 19
    for lo in range(0, kk.size, chunk):
        k_c = kk[lo : lo + chunk].astype(float)
        j_c = jj[lo : lo + chunk].astype(float)
        s = j_c[None, :] + (x[:, None] + 1) / 2
        W[kk[lo : lo + chunk], jj[lo : lo + chunk]] = 0.5 * (w @ fbm_kernel(b, k_c[None, :], s))
    # singular cells: the diagonal cell and the cell at the origin
    k = np.arange(2, n + 1, dtype=float)
    nodes, wts, _, rd = singular_cell_nodes(k - 1, k)
    W[2:, :][np.arange(n - 1), np.arange(1, n)] = np.sum(wts * _kernel_near_diag(b, k, rd), axis=0)
    nodes, wts, _, _ = singular_cell_nodes(np.zeros_like(k), np.ones_like(k))
    W[2:, 0] = np.sum(wts * fbm_kernel(b, k[None, :], nodes), axis=0)
    W[1, 0] = kbig_power_coefficient(b, 0.0)  # the whole of [0, t_1]
    return W


def _kernel_near_diag(b: float, t, dist) -> np.ndarray:
    """``K(t, t - dist)`` evaluated through the distance to the diagonal."""
    s = t - dist
    lead = kernel_constant(b) / special.gamma(b + 0.5)
    return lead * dist ** (b - 0.5) * special.hyp2f1(b - 0.5, 0.5 - b, b + 0.5, -dist / s)


@lru_cache(maxsize=8)
def _cell_integrals_cached(b: float, n: int) -> np.ndarray:
    W = _kernel_cell_integrals(b, n)
    W.setflags(write=False)
    return W


def cell_integral_matrix(beta, grid: Grid) -> np.ndarray:
    """``W[k, j] = int over cell j of K(t_k, s) ds``, shape ``(n+1, n)``."""
    b = HurstParameter.coerce(beta).beta
    return _cell_integrals_cached(b, grid.n_steps) * grid.dt ** (b + 0.5)


@lru_cache(maxsize=8)
def _cell_inverse_cached(b: float, n: int) -> np.ndarray:
    Winv = solve_triangular(_cell_integrals_cached(b, n)[1:], np.eye(n), lower=True)
    Winv.setflags(write=False)
    return Winv


def cell_integral_inverse(beta, grid: Grid) -> np.ndarray:
    """Inverse of ``cell_integral_matrix(beta, grid)[1:]`` (lower triangular, ``n x n``)."""
    b = HurstParameter.coerce(beta).beta
    return _cell_inverse_cached(b, grid.n_steps) * grid.dt ** (-b - 0.5)


def apply_Kbig(beta, phi: GridFunction) -> GridFunction:
    """``(Kbig phi)(t_k) = int_0^{t_k} K(t_k, s) phi(s) ds``.

    Product integration: the kernel is integrated exactly over each cell
    (singular cells with endpoint-graded Gauss rules) against the left
    endpoint value of ``phi``.
    """
    b = HurstParameter.coerce(beta).beta
    phi.grid.require_operator_resolution()
    W = cell_integral_matrix(b, phi.grid)
    out = np.zeros_like(phi.values)
    out[:, 1:] = phi.values[:, :-1] @ W[1:].T
    return GridFunction(phi.grid, out)


def _cells_to_nodes(cells: np.ndarray) -> np.ndarray:
    """Left-point convention: node k carries the value of cell k; node n repeats cell n-1."""
    return np.concatenate([cells, cells[:, -1:]], axis=1)


def _beta_cell_weights(p: float, q: float, grid: Grid) -> np.ndarray:
    """``Wt[k-1, j] = int_{t_j}^{t_{j+1}} s^p (t_k - s)^q ds`` for ``k = 1..n`` (incomplete beta)."""
    t = grid.nodes
    tk = t[1:, None]
    x = np.minimum(t[None, :] / tk, 1.0)
    B = special.betainc(p + 1, q + 1, x) * special.beta(p + 1, q + 1)
    # cells at or beyond t_k have both endpoints clipped to 1 and vanish
    return np.diff(B, axis=1) * tk ** (p + q + 1)


@lru_cache(maxsize=16)
def _weighted_core_unit(b: float, n: int) -> np.ndarray:
    if b < 0.5:
        a = 0.5 - b
        return _beta_cell_weights(0.5 - b, a - 1.0, Grid(float(n), n)) / special.gamma(a)
    a = b - 0.5
    return _beta_cell_weights(0.5 - b, -a, Grid(float(n), n)) / special.gamma(1.0 - a)


def weighted_inverse_core(beta, rate_cells: np.ndarray, grid: Grid):
    """``t^(b-1/2) I^(1/2-b)(s^(1/2-b) r) / c`` (rough) or ``t^(b-1/2) D^(b-1/2)(s^(1/2-b) r) / c``.

    ``r`` is piecewise constant with cell values ``rate_cells`` (shape
    ``(n_modes, n)``); the weighted fractional integral is exact for such
    ``r``.  In the smooth case the derivative is a difference quotient at
    cell midpoints, interpolated to the nodes, and the origin (where the
    result may blow up like ``t^(1/2-b)``) is flagged singular.

    Returns ``(node_values, singular)``.
    """
    b = HurstParameter.coerce(beta).beta
    n, dt = grid.n_steps, grid.dt
    r = np.atleast_2d(rate_cells)
    c = kernel_constant(b)
    t = grid.nodes
    if b == 0.5:
        return _midpoints_to_nodes(r), (0.0, 0.0)
    Wt = _weighted_core_unit(b, n)
    if b < 0.5:
        F = r @ Wt.T * dt ** (1.0 - 2.0 * b)
        out = np.zeros((r.shape[0], n + 1))
        out[:, 1:] = t[1:] ** (b - 0.5) * F / c
        return out, (0.0, 0.0)
    F = np.zeros((r.shape[0], n + 1))
    F[:, 1:] = r @ Wt.T * dt ** (1.0 - 2.0 * (b - 0.5))
    # the result behaves like t^(1/2-b) at 0, so interpolate t^(b-1/2) times it
    # F = t^p H with H smooth; differentiate H rather than F
    p = 2.0 - 2.0 * b
    H = np.empty_like(F)
    H[:, 1:] = F[:, 1:] / t[1:] ** p
    H[:, 0] = H[:, 1]
    m = grid.midpoints
    dF = p * m ** (p - 1) * 0.5 * (H[:, :-1] + H[:, 1:]) + m**p * np.diff(H, axis=1) / dt
    cells = m ** (2 * b - 1) * dF / c
    out = _midpoints_to_nodes(cells)
    out[:, 1:] *= t[1:] ** (0.5 - b)
    out[:, 0] = out[:, 1]
    return out, (b - 0.5, 0.0)


def _midpoints_to_nodes(cells: np.ndarray) -> np.ndarray:
    """Linear interpolation between cell midpoints, linear extrapolation at both ends."""
    out = np.empty((cells.shape[0], cells.shape[1] + 1))
    out[:, 1:-1] = 0.5 * (cells[:, :-1] + cells[:, 1:])
    out[:, 0] = 1.5 * cells[:, 0] - 0.5 * cells[:, 1]
    out[:, -1] = 1.5 * cells[:, -1] - 0.5 * cells[:, -2]
    return out


def _leading_coefficient(b: float, vals: np.ndarray, grid: Grid) -> np.ndarray:
    """Fit ``psi ~ gamma Kbig(1) + delta t`` on the first two nodes; return ``gamma``."""
    t = grid.nodes[1:3]
    A = np.column_stack([kbig_power_coefficient(b, 0.0) * t ** (b + 0.5), t])
    return np.linalg.solve(A, vals[:, 1:3].T)[0]


def invert_Kbig(beta, psi: GridFunction, method: str = "fractional") -> GridFunction:
    """Solve ``Kbig v = psi`` for ``v``.

    ``method="fractional"`` (default) uses the inversion formulas for
    absolutely continuous ``psi``: for ``beta < 1/2``
    ``v = t^(beta-1/2) I^(1/2-beta)(s^(1/2-beta) psi') / c``, for ``beta > 1/2``
    ``v = t^(beta-1/2) D^(beta-1/2)(s^(1/2-beta) psi') / c``.  Whenever
    ``v(0) != 0``, ``psi' ~ s^(beta-1/2)`` near 0; that leading part is the
    image of a constant, fitted on the first two nodes and inverted exactly.
    The remainder uses a piecewise-constant ``psi'`` with exact
    incomplete-beta weights.

    ``method="discrete"`` solves the lower-triangular product-integration
    system of :func:`apply_Kbig` exactly; it is the inverse used for
    Girsanov densities.

    ``method="r6"`` (rough case only) composes two Grunwald-Letnikov
    derivatives, ``v = t^(1/2-beta) D^(1/2-beta)(t^(beta-1/2) D^(2 beta) psi) / c``.
    """
    b = HurstParameter.coerce(beta).beta
    grid = psi.grid
    grid.require_operator_resolution()
    vals = psi.values
    if np.max(np.abs(vals[:, 0])) > 1e-12 * max(1.0, np.max(np.abs(vals))):
        raise InvalidInputError("Kbig^{-1} needs psi(0) = 0")
    sing = (0.0, 0.0)
    if method == "discrete":
        W = cell_integral_matrix(b, grid)[1:]
        cells = solve_triangular(W, vals[:, 1:].T, lower=True).T
        out = _cells_to_nodes(cells)
    elif method == "fractional":
        if b == 0.5:
            out = _midpoints_to_nodes(np.diff(vals, axis=1) / grid.dt)
        else:
            # Kbig(1) ~ t^(b+1/2) carries the non-smooth part of psi'; invert it exactly
            gam = _leading_coefficient(b, vals, grid)
            rest = vals - np.outer(gam, kbig_power_coefficient(b, 0.0) * grid.nodes ** (b + 0.5))
            out, sing = weighted_inverse_core(b, np.diff(rest, axis=1) / grid.dt, grid)
            out = out + gam[:, None]
    elif method == "r6":
        if b >= 0.5:
            raise InvalidInputError("the r6 route is only defined for beta < 1/2")
        t = grid.nodes
        d2b = frac_apply(FracOpSpec(2 * b, kind=Kind.DERIVATIVE), psi).values
        inner = np.zeros_like(d2b)
        inner[:, 1:] = t[1:] ** (b - 0.5) * d2b[:, 1:]
        outer = frac_apply(FracOpSpec(0.5 - b, kind=Kind.DERIVATIVE), GridFunction(grid, inner)).values
        out = t ** (0.5 - b) * outer / kernel_constant(b)
    else:
        raise InvalidInputError(f"unknown inversion method {method!r}")
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("Kbig inversion produced non-finite values")
    return GridFunction(grid, out, sing)
