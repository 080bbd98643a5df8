"""Time grids, Hurst parameters and grid-sampled H-valued functions."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.special import zeta

from .errors import GridMismatchError, GridTooCoarseError, InvalidInputError, NonFiniteError

#: Operators with singular kernels refuse grids coarser than this.
MIN_OPERATOR_STEPS = 8


@dataclass(frozen=True)
class HurstParameter:
    """Hurst index of the driving fractional Brownian motion."""

    beta: float

    def __post_init__(self):
        b = float(self.beta)
        if not (0.0 < b < 1.0) or not np.isfinite(b):
            raise InvalidInputError(f"Hurst parameter must lie in (0, 1), got {self.beta!r}")
        object.__setattr__(self, "beta", b)

    @property
    def regime(self) -> str:
        if self.beta < 0.5:
            return "rough"
        if self.beta > 0.5:
            return "smooth"
        return "standard"

    @property
    def is_standard(self) -> bool:
        return self.beta == 0.5

    @classmethod
    def coerce(cls, value) -> "HurstParameter":
        return value if isinstance(value, cls) else cls(value)

    def __float__(self) -> float:
        return self.beta


@dataclass(frozen=True)
class Grid:
    """Uniform partition ``t_k = k T / n_steps`` of ``[0, T]``."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidInputError(f"horizon T must be positive, got {self.T!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise InvalidInputError(f"n_steps must be an integer >= 2, got {self.n_steps!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.T, self.n_steps * int(factor))

    def require_operator_resolution(self):
        if self.n_steps < MIN_OPERATOR_STEPS:
            raise GridTooCoarseError(
                f"singular quadrature needs n_steps >= {MIN_OPERATOR_STEPS}, got {self.n_steps}"
            )


@dataclass(frozen=True)
class GridFunction:
    """An H-valued function sampled on a grid.

    ``values[m, k]`` is the m-th coordinate at node ``t_k``.  ``singular``
    records, for the left and right endpoint, the exponent ``g`` of a
    ``dist**(-g)`` blow-up of the sampled function (0 when regular).  At a
    singular endpoint the stored node value is only a placeholder copied from
    the neighbouring node; quadratures skip it.
    """

    grid: Grid
    values: np.ndarray
    singular: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[1] != self.grid.n_steps + 1 or v.shape[0] < 1:
            raise GridMismatchError(
                f"values of shape {np.shape(self.values)} do not fit a grid with "
                f"{self.grid.n_steps + 1} nodes"
            )
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("grid function contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "singular", (float(self.singular[0]), float(self.singular[1])))

    @property
    def n_modes(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_callable(cls, grid: Grid, funcs: Callable | Sequence[Callable]) -> "GridFunction":
        """Sample one callable per mode (a single callable gives one mode)."""
        if callable(funcs):
            funcs = [funcs]
        t = grid.nodes
        rows = [np.broadcast_to(np.asarray(f(t), dtype=float), t.shape) for f in funcs]
        return cls(grid, np.vstack(rows))

    @classmethod
    def zeros(cls, grid: Grid, n_modes: int = 1) -> "GridFunction":
        return cls(grid, np.zeros((n_modes, grid.n_steps + 1)))

    def with_values(self, values, singular=None) -> "GridFunction":
        return GridFunction(self.grid, values, self.singular if singular is None else singular)

    def mode(self, m: int) -> np.ndarray:
        return self.values[m]

    def __add__(self, other: "GridFunction") -> "GridFunction":
        check_same_grid(self, other)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        check_same_grid(self, other)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.grid, self.values * float(scalar), self.singular)

    __rmul__ = __mul__

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(l2_squared(self))))


def check_same_grid(f: GridFunction, g: GridFunction):
    if f.grid != g.grid:
        raise GridMismatchError(f"grids differ: {f.grid} vs {g.grid}")
    if f.values.shape != g.values.shape:
        raise GridMismatchError(f"shapes differ: {f.values.shape} vs {g.values.shape}")


def trapezoid_weights(grid: Grid, singular: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Trapezoid weights; a singular endpoint node gets weight 0 (see :func:`l2_squared`)."""
    n = grid.n_steps
    w = np.full(n + 1, grid.dt)
    for end, g in ((0, singular[0]), (n, singular[1])):
        w[end] = 0.0 if g > 0 else 0.5 * grid.dt
    return w


def _endpoint_correction(f1: np.ndarray, f2: np.ndarray, g: float, dt: float) -> np.ndarray:
    """Missing mass of ``int f^2`` near an endpoint where ``f ~ c d^(-g) + r``.

    ``c`` and ``r`` are fitted on the two nodes next to the endpoint
    (distances ``dt`` and ``2 dt``); each power in ``f^2`` then gets its
    generalised Euler-Maclaurin (zeta) correction relative to the trapezoid
    sum that skips the endpoint.
    """
    p = 2.0 * g
    if p >= 1.0:
        raise InvalidInputError(f"square of a dist**(-{g}) singularity is not integrable")
    a1, a2 = dt ** (-g), (2 * dt) ** (-g)
    c = (f1 - f2) / (a1 - a2)
    r = f1 - c * a1
    return (
        -float(zeta(p)) * dt ** (1 - p) * c**2
        - 2 * float(zeta(g)) * dt ** (1 - g) * c * r
        + 0.5 * dt * r**2
    )


def l2_squared(f: GridFunction) -> np.ndarray:
    """Per-mode squared L2(0, T) norms.

    Regular endpoints use the trapezoid rule.  At an endpoint flagged
    singular with exponent ``g`` the placeholder node is skipped and the
    near-endpoint mass is restored by :func:`_endpoint_correction`.
    """
    w = trapezoid_weights(f.grid, f.singular)
    out = (f.values**2) @ w
    v, dt = f.values, f.grid.dt
    if f.singular[0] > 0:
        out += _endpoint_correction(v[:, 1], v[:, 2], f.singular[0], dt)
    if f.singular[1] > 0:
        out += _endpoint_correction(v[:, -2], v[:, -3], f.singular[1], dt)
    return out


def mode_inner(f: GridFunction, g: GridFunction) -> np.ndarray:
    """Per-mode L2(0, T) inner products by the trapezoid rule (regular functions only)."""
    check_same_grid(f, g)
    w = trapezoid_weights(f.grid)
    return (f.values * g.values) @ w


#: Row-block size of :func:`stable_matmul`.
MATMUL_BLOCK = 256


def stable_matmul(X: np.ndarray, M: np.ndarray, offset: int = 0, block: int = MATMUL_BLOCK) -> np.ndarray:
    """``X @ M`` computed in zero-padded row blocks of a fixed shape.

    BLAS may round a row differently depending on the shape of the call and
    on the row's position within it.  Row ``i`` of ``X`` is treated as
    absolute row ``offset + i`` and always lands in the same slot of a
    fixed-shape block, so batching never changes results.
    """
    X = np.asarray(X, dtype=float)
    out = np.empty((X.shape[0], M.shape[1]))
    buf = np.zeros((block, X.shape[1]))
    i = 0
    while i < X.shape[0]:
        slot = (offset + i) % block
        rows = min(block - slot, X.shape[0] - i)
        buf[:] = 0.0
        buf[slot : slot + rows] = X[i : i + rows]
        out[i : i + rows] = (buf @ M)[slot : slot + rows]
        i += rows
    return out
