"""Scalar and cylindrical fBm paths: a Volterra-kernel generator and a Cholesky oracle.

The kernel generator writes ``B(t_k) = sum_j int_{cell j} K(t_k, s) dW(s)``.
On cells far from ``t_k`` the kernel is replaced by its cell mean, so the
contribution is ``mean * dW_j``.  On the two cells where ``K`` is singular
(the cell ending at ``t_k`` and the cell at the origin) the kernel is
projected onto a few power functions carrying the singular behaviour, and
the matching Wiener integrals are sampled jointly with ``dW_j``.  The
constant function always belongs to every projection space, so a drift
shift of ``dW`` moves the path by exactly the discrete ``Kbig`` of the
drift; the Girsanov module relies on this.

Random numbers come from Philox with ``key = seed`` and the counter
``[0, generator, path, stream]``, one stream per (path, mode).  Paths are
therefore a pure function of ``(seed, stream_id, grid, beta)``, whatever
batching or threading is used.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg, special

from .errors import ConvergenceError, InvalidInputError, ResourceLimitError
from .fractional import (
    _cell_integrals_cached,
    _kernel_near_diag,
    fbm_kernel,
    singular_cell_nodes,
)
from .grid import Grid, HurstParameter, stable_matmul

__all__ = [
    "NoiseSeed",
    "FbmPathSet",
    "DEFAULT_MAX_ELEMENTS",
    "fbm_covariance",
    "sample_fbm_kernel",
    "sample_fbm_cholesky",
    "kernel_sampler_covariance",
    "white_normals",
    "paths_from_normals",
    "dump_paths",
    "load_paths",
]

#: Default cap on ``n_paths * n_modes * n_steps`` for a single sampling call.
DEFAULT_MAX_ELEMENTS = 200_000_000

_KERNEL_GENERATOR = 0
_CHOLESKY_GENERATOR = 1


@dataclass(frozen=True)
class NoiseSeed:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        s, k = int(self.seed), int(self.stream_id)
        if not 0 <= s < 2**64:
            raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if k < 0:
            raise InvalidInputError(f"stream_id must be nonnegative, got {self.stream_id!r}")
        object.__setattr__(self, "seed", s)
        object.__setattr__(self, "stream_id", k)

    @classmethod
    def coerce(cls, value) -> "NoiseSeed":
        return value if isinstance(value, cls) else cls(value)

    def generator(self, path: int, mode: int = 0, kind: int = _KERNEL_GENERATOR) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=self.seed, counter=[0, kind, int(path), self.stream_id + int(mode)]
        )
        return np.random.Generator(bitgen)


@dataclass(frozen=True)
class FbmPathSet:
    """Sampled fBm paths, ``paths[p, m, k] = B_m(t_k)`` on path ``p``.

    ``normals[p, m]`` holds the standard normals the paths were built from
    (layout depends on ``method``); ``white_increments`` are the Brownian
    increments ``dW`` of the kernel representation.  ``path_offset`` is the
    absolute index of the first path, so batches of one ensemble can be
    generated independently.
    """

    grid: Grid
    beta: HurstParameter
    paths: np.ndarray
    normals: np.ndarray
    seed: NoiseSeed
    method: str = "kernel"
    path_offset: int = 0
    jitter: float = 0.0

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_modes(self) -> int:
        return self.paths.shape[1]

    @property
    def path_ids(self) -> np.ndarray:
        return self.path_offset + np.arange(self.n_paths)

    @property
    def white_increments(self) -> np.ndarray:
        if self.method != "kernel":
            raise InvalidInputError("only kernel-method paths carry Brownian increments")
        n = self.grid.n_steps
        return np.sqrt(self.grid.dt) * self.normals[..., :n]


def fbm_covariance(beta, s, t):
    """``E B(s) B(t) = (t^(2b) + s^(2b) - |t - s|^(2b)) / 2``."""
    b = HurstParameter.coerce(beta).beta
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise InvalidInputError("fBm covariance needs nonnegative times")
    h = 2.0 * b
    out = 0.5 * (t**h + s**h - np.abs(t - s) ** h)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# hybrid kernel generator


def _kernel_by_dist(b: float, t, left, right):
    """``K(t, s)`` with ``s`` given through its distances to 0 and to ``t``."""
    near = right <= 0.5 * t
    out = np.empty(np.broadcast(t, left, right).shape)
    t_b, l_b, r_b = np.broadcast_arrays(t, left, right)
    out[near] = _kernel_near_diag(b, t_b[near], r_b[near])
    out[~near] = fbm_kernel(b, t_b[~near], l_b[~near])
    return out


def _sqrt_factor(G: np.ndarray) -> np.ndarray:
    """Lower block factor ``L`` of ``G = L L^T`` with ``L[0] = (sqrt(G00), 0, ...)``.

    The trailing block is a symmetric PSD square root of the Schur
    complement, which stays well defined when the basis is nearly dependent.
    """
    d = G.shape[0]
    L = np.zeros((d, d))
    L[0, 0] = np.sqrt(G[0, 0])
    m = G[1:, 0] / L[0, 0]
    L[1:, 0] = m
    S = G[1:, 1:] - np.outer(m, m)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    L[1:, 1:] = V * np.sqrt(np.clip(w, 0.0, None))
    return L


def _loading(G: np.ndarray, L: np.ndarray, rhs: np.ndarray, subset) -> np.ndarray:
    """Loadings on the normals of a cell for ``K`` projected onto ``span(basis[subset])``."""
    idx = np.asarray(subset)
    coef = np.linalg.lstsq(G[np.ix_(idx, idx)], rhs[idx], rcond=1e-13)[0]
    return coef @ L[idx]


@lru_cache(maxsize=8)
def _hybrid_loadings(b: float, n: int):
    """Unit-step loadings of the kernel generator.

    Returns ``(W, diag, origin)``: ``W[k, j]`` multiplies the first normal of
    cell ``j`` (it equals the cell integral of the kernel), ``diag[k]`` the
    second normal of cell ``k-1`` and ``origin[k]`` the three extra normals
    of cell 0.  Paths are ``dt**b`` times these combinations.
    """
    W = _cell_integrals_cached(b, n)
    # normals layout per (path, mode): [0, n) first normal of each cell,
    # [n, 2n) second normal of each cell, then two more for cell 0
    diag = np.zeros(n + 1)
    origin = np.zeros((n + 1, 3))
    if b == 0.5:
        return W, diag, origin
    e = b - 0.5
    # cells j >= 1: basis {1, (j+1-s)^e}
    G2 = np.array([[1.0, 1.0 / (e + 1)], [1.0 / (e + 1), 1.0 / (2 * e + 1)]])
    L2 = _sqrt_factor(G2)
    # cell 0: basis {1, (1-s)^e, s^e, s^-e}
    Bf = special.beta
    G4 = np.array(
        [
            [1.0, 1 / (e + 1), 1 / (e + 1), 1 / (1 - e)],
            [1 / (e + 1), 1 / (2 * e + 1), Bf(e + 1, e + 1), Bf(1 - e, e + 1)],
            [1 / (e + 1), Bf(e + 1, e + 1), 1 / (2 * e + 1), 1.0],
            [1 / (1 - e), Bf(1 - e, e + 1), 1.0, 1 / (1 - 2 * e)],
        ]
    )
    L4 = _sqrt_factor(G4)

    k = np.arange(2, n + 1, dtype=float)
    # diagonal cells [k-1, k]
    nodes, wts, _, rd = singular_cell_nodes(k - 1, k)
    Kd = _kernel_near_diag(b, k, rd)
    rhs = np.stack([np.sum(wts * Kd, axis=0), np.sum(wts * Kd * rd**e, axis=0)])
    for i, kk in enumerate(range(2, n + 1)):
        diag[kk] = _loading(G2, L2, rhs[:, i], [0, 1])[1]
    # origin cell for k >= 2
    nodes, wts, ld, _ = singular_cell_nodes(np.zeros_like(k), np.ones_like(k))
    Ko = fbm_kernel(b, k[None, :], nodes)
    rhs = np.stack(
        [
            np.sum(wts * Ko, axis=0),
            np.zeros_like(k),
            np.sum(wts * Ko * nodes**e, axis=0),
            np.sum(wts * Ko * nodes ** (-e), axis=0),
        ]
    )
    for i, kk in enumerate(range(2, n + 1)):
        origin[kk] = _loading(G4, L4, rhs[:, i], [0, 2, 3])[1:]
    # k = 1: the single cell is both diagonal and origin
    nodes, wts, ld, rd = singular_cell_nodes(0.0, 1.0)
    K1 = _kernel_by_dist(b, 1.0, ld, rd)
    rhs = np.array([np.sum(wts * K1 * f) for f in (1.0, rd**e, ld**e, ld ** (-e))])
    origin[1] = _loading(G4, L4, rhs, [0, 1, 2, 3])[1:]
    return W, diag, origin


def _n_normals(n: int) -> int:
    # one normal per cell for dW, one per cell for the diagonal power, two more at the origin
    return 2 * n + 2


def _check_budget(n_paths: int, n_modes: int, n_steps: int, max_elements: int):
    total = int(n_paths) * int(n_modes) * int(n_steps)
    if total > max_elements:
        raise ResourceLimitError(
            f"requested {n_paths} paths x {n_modes} modes x {n_steps} steps = {total} "
            f"values exceeds the cap {max_elements}"
        )


def white_normals(seed: NoiseSeed, n_steps: int, n_modes: int, path_ids, kind: int = _KERNEL_GENERATOR):
    """Standard normals ``(len(path_ids), n_modes, 2 n + 2)`` of the kernel generator."""
    d = _n_normals(n_steps) if kind == _KERNEL_GENERATOR else n_steps
    out = np.empty((len(path_ids), n_modes, d))
    for i, p in enumerate(path_ids):
        for m in range(n_modes):
            out[i, m] = seed.generator(p, m, kind).standard_normal(d)
    return out


def paths_from_normals(beta, grid: Grid, normals: np.ndarray, path_offset: int = 0) -> np.ndarray:
    """Deterministically rebuild kernel-method paths from their normals."""
    b = HurstParameter.coerce(beta).beta
    n = grid.n_steps
    W, diag, origin = _hybrid_loadings(b, n)
    xi = normals[..., :n]
    paths = np.empty(normals.shape[:-1] + (n + 1,))
    # per mode, so each matrix product has the same shape whatever n_modes is
    for m in range(normals.shape[1]):
        x = xi[:, m]
        p = stable_matmul(x, W.T, path_offset)
        p[:, 2:] += normals[:, m, n + 1 : 2 * n] * diag[2:]
        p += stable_matmul(normals[:, m, [n, 2 * n, 2 * n + 1]], origin.T, path_offset)
        paths[:, m] = p
    paths *= grid.dt**b
    paths[..., 0] = 0.0
    return paths


def sample_fbm_kernel(
    beta,
    grid: Grid,
    n_modes: int,
    n_paths: int,
    seed,
    path_offset: int = 0,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> FbmPathSet:
    """Independent fBm paths for ``n_modes`` modes from the Volterra representation.

    Paths ``path_offset .. path_offset + n_paths - 1`` of the ensemble
    defined by ``seed`` are produced; requesting them in several batches
    gives the same numbers as one call.
    """
    b = HurstParameter.coerce(beta)
    grid.require_operator_resolution()
    seed = NoiseSeed.coerce(seed)
    if n_modes < 1 or n_paths < 1:
        raise InvalidInputError("n_modes and n_paths must be positive")
    _check_budget(n_paths, n_modes, grid.n_steps, max_elements)
    ids = path_offset + np.arange(n_paths)
    normals = white_normals(seed, grid.n_steps, n_modes, ids)
    paths = paths_from_normals(b, grid, normals, path_offset)
    return FbmPathSet(grid, b, paths, normals, seed, "kernel", path_offset)


def kernel_sampler_covariance(beta, grid: Grid) -> np.ndarray:
    """Exact node covariance of the kernel generator (its discretisation bias is the gap to fBm)."""
    b = HurstParameter.coerce(beta).beta
    n = grid.n_steps
    W, diag, origin = _hybrid_loadings(b, n)
    C = W @ W.T
    D = np.zeros((n + 1, n))
    D[np.arange(2, n + 1), np.arange(1, n)] = diag[2:]
    C += D @ D.T + origin @ origin.T
    return C * grid.dt ** (2 * b)


# ---------------------------------------------------------------------------
# Cholesky oracle


def _cholesky_factor(b: float, grid: Grid, max_jitter: float = 1e-8):
    t = grid.nodes[1:]
    C = fbm_covariance(b, t[:, None], t[None, :])
    scale = float(np.max(np.diag(C)))
    jitter = 0.0
    while True:
        try:
            return linalg.cholesky(C + jitter * scale * np.eye(len(t)), lower=True), jitter
        except linalg.LinAlgError:
            jitter = 1e-14 if jitter == 0.0 else jitter * 10
            if jitter > max_jitter:
                cond = np.linalg.cond(C)
                raise ConvergenceError(
                    f"fBm covariance is not numerically positive definite (condition ~{cond:.3g})",
                    trace={"condition": cond, "max_jitter": max_jitter},
                )


def sample_fbm_cholesky(
    beta,
    grid: Grid,
    n_modes: int,
    n_paths: int,
    seed,
    path_offset: int = 0,
    max_elements: int = DEFAULT_MAX_ELEMENTS,
) -> FbmPathSet:
    """fBm paths with the exact node covariance (Cholesky of the Gram matrix).

    Any diagonal jitter needed for the factorisation is recorded in the
    returned set.
    """
    b = HurstParameter.coerce(beta)
    seed = NoiseSeed.coerce(seed)
    if n_modes < 1 or n_paths < 1:
        raise InvalidInputError("n_modes and n_paths must be positive")
    _check_budget(n_paths, n_modes, grid.n_steps, max_elements)
    L, jitter = _cholesky_factor(b.beta, grid)
    ids = path_offset + np.arange(n_paths)
    normals = white_normals(seed, grid.n_steps, n_modes, ids, kind=_CHOLESKY_GENERATOR)
    paths = np.zeros((n_paths, n_modes, grid.n_steps + 1))
    for m in range(n_modes):
        paths[:, m, 1:] = stable_matmul(normals[:, m], L.T, path_offset)
    return FbmPathSet(grid, b, paths, normals, seed, "cholesky", path_offset, jitter)


# ---------------------------------------------------------------------------
# binary dump

_MAGIC = b"FBMP"


def dump_paths(paths: np.ndarray, fh):
    """Write a tensor as ``FBMP``, ``uint32 ndim``, ``ndim x uint64`` shape, little-endian float64 data."""
    a = np.ascontiguousarray(paths, dtype="<f8")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes())


def load_paths(fh) -> np.ndarray:
    if fh.read(4) != _MAGIC:
        raise InvalidInputError("not a path dump (bad magic)")
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    data = fh.read()
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(float)
