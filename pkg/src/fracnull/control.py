"""Steering controls, their dual-space (H-star) norms and the exponential moment problem."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, linalg

from .errors import ConvergenceError, GridMismatchError, InvalidInputError, NonFiniteError
from .fractional import kernel_constant, weighted_inverse_core
from .grid import Grid, GridFunction, HurstParameter, _endpoint_correction, l2_squared, trapezoid_weights
from .spectral import SpectralModel

__all__ = [
    "ControlFunction",
    "MomentProblem",
    "MomentSolution",
    "explicit_control",
    "hstar_norm",
    "hstar_flag",
    "verify_steering",
    "moment_solve",
]


@dataclass(frozen=True)
class ControlFunction:
    """An H-valued control ``u(t)`` on a grid.

    ``source`` (optional) evaluates the control at arbitrary times and is
    used for refinement; ``exp_modes = (coef, rate)`` marks controls of the
    form ``u_n(t) = coef_n exp(-rate_n t)``, whose norms are then evaluated
    through an exact scaling law.  ``trace`` records the H-star norm at the
    refinement levels and ``hstar_flag`` its reading (finite, divergent,
    inconclusive).
    """

    grid: Grid
    values: GridFunction
    norm_l2: float
    norm_hstar: float | None = None
    hstar_flag: str | None = None
    trace: tuple = ()
    source: Callable | None = field(default=None, compare=False, repr=False)
    exp_modes: tuple | None = field(default=None, compare=False, repr=False)

    @property
    def divergent(self) -> bool:
        return self.hstar_flag == "divergent"

    @classmethod
    def from_callable(cls, grid: Grid, func: Callable, n_modes: int = 1) -> "ControlFunction":
        """Wrap ``func(t) -> (n_modes, len(t))`` (or a 1-D array for one mode).

        A control that blows up at ``t = 0`` is allowed: its node-0 value is a
        placeholder copied from node 1.
        """

        def src(t):
            return np.asarray(func(np.asarray(t, dtype=float)), dtype=float).reshape(n_modes, -1)

        t = grid.nodes
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = src(t)
        sing = (0.0, 0.0)
        if not np.all(np.isfinite(vals[:, 0])):
            vals[:, 0] = vals[:, 1]
            sing = (1e-3, 0.0)  # blow-up of unknown order; the node is never used
        l2sq = 0.0
        for m in range(n_modes):
            l2sq += integrate.quad(lambda s: src(np.array([s]))[m, 0] ** 2, 0.0, grid.T, limit=200)[0]
        return cls(grid, GridFunction(grid, vals, sing), math.sqrt(l2sq), source=src)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"u_{m + 1}" for m in range(self.values.n_modes)])
        for k, t in enumerate(self.grid.nodes):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in self.values.values[:, k]])
        return buf.getvalue()


def explicit_control(model: SpectralModel, x, grid: Grid | None = None, n_steps: int = 1024) -> ControlFunction:
    """``u_n(t) = -x_n exp(-alpha_n t) / (T sqrt(lambda_n))``, which steers ``x`` to 0 at ``T``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (model.n_modes,):
        raise GridMismatchError(f"state has {x.size} coordinates, model has {model.n_modes} modes")
    grid = grid or Grid(model.T, n_steps)
    if abs(grid.T - model.T) > 1e-12 * model.T:
        raise GridMismatchError("control grid must span the model horizon")
    lam, a, T = model.lambdas, model.alphas, model.T
    bad = (lam == 0) & (x != 0)
    if np.any(bad):
        raise InvalidInputError(f"modes {np.flatnonzero(bad) + 1} carry no noise and cannot be steered")
    coef = np.zeros_like(x)
    live = x != 0
    coef[live] = -x[live] / (T * np.sqrt(lam[live]))
    vals = coef[:, None] * np.exp(-np.outer(a, grid.nodes))
    # exact per-mode L2 norms
    l2sq = coef**2 * (-np.expm1(-2 * a * T)) / (2 * a)
    return ControlFunction(
        grid,
        GridFunction(grid, vals),
        float(math.sqrt(np.sum(l2sq))),
        source=lambda t: coef[:, None] * np.exp(-np.outer(a, np.asarray(t, dtype=float))),
        exp_modes=(coef, a.copy()),
    )


# ---------------------------------------------------------------------------
# H-star norms

_PROFILE_SPAN = 32.0
_PROFILE_STEPS = 2048


@lru_cache(maxsize=8)
def _exp_profile(b: float):
    """Cumulative ``J(L) = int_0^L |Kinv e^(-tau)|^2 dtau`` on a grid of ``[0, 32]``.

    Beyond the grid ``Kinv e^(-tau) ~ (1/2 - b) / (c tau)``, so the tail adds
    ``((1/2 - b) / c)^2 (1/32 - 1/L)``.
    """
    grid = Grid(_PROFILE_SPAN, _PROFILE_STEPS)
    dt = grid.dt
    cells = np.exp(-grid.nodes[:-1]) * (-math.expm1(-dt)) / dt
    v, sing = weighted_inverse_core(b, cells[None, :], grid)
    f2 = v[0] ** 2
    cum = np.zeros(grid.n_steps + 1)
    cum[1:] = np.cumsum(0.5 * dt * (f2[:-1] + f2[1:]))
    if sing[0] > 0:
        # first cell from the singular endpoint model instead of the placeholder
        first = _endpoint_correction(v[:, 1], v[:, 2], sing[0], dt)[0] + 0.5 * dt * f2[1]
        cum[1:] += first - cum[1]
    return grid.nodes, cum


def _exp_unit_norm_sq(b: float, L: np.ndarray) -> np.ndarray:
    t, cum = _exp_profile(b)
    tail_amp = ((0.5 - b) / kernel_constant(b)) ** 2
    out = np.interp(np.minimum(L, t[-1]), t, cum)
    far = L > t[-1]
    out[far] += tail_amp * (1.0 / t[-1] - 1.0 / L[far])
    return out


def _hstar_exp_modes(b: float, coef: np.ndarray, rate: np.ndarray, T: float) -> float:
    if b == 0.5:
        return float(np.sum(coef**2 * (-np.expm1(-2 * rate * T)) / (2 * rate)))
    return float(np.sum(coef**2 * rate ** (2 * b - 2) * _exp_unit_norm_sq(b, rate * T)))


def _hstar_sampled(b: float, source: Callable, grid: Grid) -> float:
    """``int |Kinv u|^2`` with ``u`` taken piecewise constant at the cell midpoints."""
    cells = source(grid.midpoints)
    v, sing = weighted_inverse_core(b, cells, grid)
    return float(np.sum(l2_squared(GridFunction(grid, v, sing))))


def hstar_flag(trace) -> str:
    """Read a refinement sequence of norms.

    ``finite`` if the last relative change is below 5%; ``divergent`` if the
    sequence doubles overall or increases without contracting increments;
    ``inconclusive`` otherwise.
    """
    v = np.asarray([val for _, val in trace], dtype=float)
    if not np.all(np.isfinite(v)):
        return "divergent"
    if abs(v[-1] - v[-2]) < 0.05 * abs(v[-1]):
        return "finite"
    inc = np.diff(v)
    if v[-1] >= 2 * v[0] or (np.all(inc > 0) and inc[-1] >= 0.9 * inc[-2]):
        return "divergent"
    return "inconclusive"


def hstar_norm(beta, u: ControlFunction, levels: int = 3) -> ControlFunction:
    """H-star norm ``(int_0^T |Kinv u|^2)^(1/2)`` at ``levels`` dyadic refinements.

    ``Kinv u = t^(b-1/2) I^(1/2-b)(s^(1/2-b) u) / c`` for ``b < 1/2`` and
    ``t^(b-1/2) D^(b-1/2)(s^(1/2-b) u) / c`` for ``b > 1/2``.  Exponential
    controls are refined over the mode truncation (a finite sum of smooth
    modes always has a finite norm, so divergence can only appear across
    truncations); other controls are refined in time, the finest level
    being ``u.grid``.  The value reported is the finest one; a finite grid
    cannot prove divergence, so divergence is a trend flag.
    """
    b = HurstParameter.coerce(beta).beta
    trace = []
    if u.exp_modes is not None:
        coef, rate = u.exp_modes
        N = len(coef)
        for lev in range(levels):
            m = max(1, math.ceil(N / 2 ** (levels - 1 - lev)))
            trace.append((f"modes={m}", math.sqrt(_hstar_exp_modes(b, coef[:m], rate[:m], u.grid.T))))
    else:
        if u.source is None:
            raise InvalidInputError("refinement needs a control with a source callable")
        n = u.grid.n_steps
        for lev in range(levels):
            g = Grid(u.grid.T, max(8, n // 2 ** (levels - 1 - lev)))
            trace.append((f"n_steps={g.n_steps}", math.sqrt(_hstar_sampled(b, u.source, g))))
    if not all(np.isfinite(v) for _, v in trace):
        raise NonFiniteError("H-star norm evaluation produced non-finite values")
    return replace(u, norm_hstar=trace[-1][1], hstar_flag=hstar_flag(trace), trace=tuple(trace))


def verify_steering(model: SpectralModel, x, u: ControlFunction, grid: Grid | None = None) -> float:
    """Relative size ``|y(T)| / max(|x|, 1)`` of ``y' = A y + B u``, ``y(0) = x``.

    ``y(T) = S(T) x + int_0^T S(T - t) B u(t) dt`` with the integrand
    integrated by the trapezoid rule (exact when it is constant in time, as
    for the explicit control).
    """
    x = np.asarray(x, dtype=float).ravel()
    grid = grid or u.grid
    if x.shape != (model.n_modes,) or u.values.n_modes != model.n_modes:
        raise GridMismatchError("state, control and model dimensions differ")
    if grid != u.grid:
        raise GridMismatchError("control is sampled on a different grid")
    t = grid.nodes
    prop = np.exp(-np.outer(model.alphas, model.T - t))
    y = np.exp(-model.alphas * model.T) * x + np.sqrt(model.lambdas) * (
        (prop * u.values.values) @ trapezoid_weights(grid)
    )
    return float(np.linalg.norm(y) / max(np.linalg.norm(x), 1.0))


# ---------------------------------------------------------------------------
# moment problem


@dataclass(frozen=True)
class MomentProblem:
    """Find ``h`` with ``int_0^T e^(-lambda_n t) h(t) dt = lambda_n c_n`` for ``n <= n_trunc``.

    ``ridge=None`` means the default ``1e-12 * trace(G)``.
    """

    exponents: np.ndarray
    targets: np.ndarray
    T: float
    n_trunc: int
    ridge: float | None = None
    tol: float = 1e-8

    def __post_init__(self):
        lam = np.asarray(self.exponents, dtype=float).ravel()
        c = np.asarray(self.targets, dtype=float).ravel()
        if lam.shape != c.shape:
            raise InvalidInputError("exponents and targets differ in length")
        if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise InvalidInputError("exponents must be positive and strictly increasing")
        if not 1 <= self.n_trunc <= lam.size:
            raise InvalidInputError(f"n_trunc must lie in 1..{lam.size}")
        if not self.T > 0:
            raise InvalidInputError("T must be positive")
        if self.ridge is not None and self.ridge < 0:
            raise InvalidInputError("ridge must be nonnegative")
        object.__setattr__(self, "exponents", lam)
        object.__setattr__(self, "targets", c)


@dataclass(frozen=True)
class MomentSolution:
    """Minimum-norm ``h = sum_j a_j e^(-lambda_j t)`` and its antiderivative control ``u_0``."""

    problem: MomentProblem
    coefficients: np.ndarray
    residuals: np.ndarray
    condition: float
    ridge: float
    control: ControlFunction

    def h(self, t):
        lam = self.problem.exponents[: self.problem.n_trunc]
        return self.coefficients @ np.exp(-np.outer(lam, np.asarray(t, dtype=float)))

    def u0(self, t):
        lam = self.problem.exponents[: self.problem.n_trunc]
        t = np.asarray(t, dtype=float)
        return (self.coefficients / lam) @ (-np.expm1(-np.outer(lam, t)))

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_trunc": self.problem.n_trunc,
                "T": self.problem.T,
                "ridge": self.ridge,
                "condition": self.condition,
                "residuals": self.residuals.tolist(),
                "max_residual": float(np.max(np.abs(self.residuals))),
                "coefficients": self.coefficients.tolist(),
            },
            indent=2,
            sort_keys=True,
        )


def moment_solve(p: MomentProblem, n_steps: int = 1024) -> MomentSolution:
    """Minimum-L2-norm solution of the truncated moment problem.

    ``h`` lies in ``span{e^(-lambda_j t)}``; its coefficients solve the
    (optionally ridge-regularised) Gram system
    ``G_ij = (1 - e^(-(lambda_i + lambda_j) T)) / (lambda_i + lambda_j)``.
    Residuals are those of the unregularised constraints.
    """
    lam = p.exponents[: p.n_trunc]
    d = lam * p.targets[: p.n_trunc]
    s = lam[:, None] + lam[None, :]
    G = -np.expm1(-s * p.T) / s
    ridge = 1e-12 * float(np.trace(G)) if p.ridge is None else float(p.ridge)
    cond = float(np.linalg.cond(G))
    try:
        a = linalg.solve(G + ridge * np.eye(p.n_trunc), d, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceError(
            f"Gram solve failed (condition ~{cond:.3g}, ridge {ridge:g})", trace={"ridges": [ridge]}
        ) from exc
    res = G @ a - d
    scale = max(1.0, float(np.max(np.abs(d))))
    if ridge == 0.0 and np.max(np.abs(res)) > p.tol * scale:
        raise ConvergenceError(
            f"residual {np.max(np.abs(res)):.3g} above tolerance with ridge = 0 "
            f"(condition ~{cond:.3g}); minimal ridge tried: 0",
            trace={"ridges": [0.0], "residuals": res.tolist()},
        )
    grid = Grid(p.T, n_steps)
    u0 = lambda t: ((a / lam) @ (-np.expm1(-np.outer(lam, np.asarray(t, dtype=float)))))[None, :]
    vals = u0(grid.nodes)
    l2sq = integrate.quad(lambda t: float(u0(np.array([t]))[0, 0]) ** 2, 0.0, p.T, limit=200)[0]
    ctrl = ControlFunction(grid, GridFunction(grid, vals), math.sqrt(l2sq), source=u0)
    return MomentSolution(p, a, res, cond, ridge, ctrl)
