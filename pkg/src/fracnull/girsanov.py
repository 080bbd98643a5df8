"""Semilinear equations driven by fBm and the Girsanov density against the linear equation.

For ``dX = (A X + F(X)) dt + B dW^beta`` with ``F = B G`` the law of ``X_T``
is that of the linear solution ``Z_T`` reweighted by

    rho = exp( sum_k <v_k, dW_k> - 1/2 sum_k |v_k|^2 dt ),

where ``v`` solves ``Kbig v = int_0^. G(Z_s) ds`` and ``dW`` are the Brownian
increments from which the fBm driving ``Z`` was built.  On the grid the
cumulative drift is a left-point sum and ``Kbig`` is the product-integration
matrix used by the sampler, so the reweighting is exact for the discretised
scheme (it is Gaussian change of measure on the sampler's normals).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import GridMismatchError, InvalidInputError, NonFiniteError
from .fractional import cell_integral_inverse, invert_Kbig
from .grid import Grid, GridFunction, HurstParameter, stable_matmul
from .noise import DEFAULT_MAX_ELEMENTS, NoiseSeed, sample_fbm_kernel
from .spectral import OUEnsemble, SpectralModel, _check_dims, ou_recursion

__all__ = [
    "NonlinearityG",
    "nemytskii",
    "linear_nonlinearity",
    "DensitySample",
    "drift_transform",
    "density_rho",
    "densities",
    "classical_density",
    "simulate_semilinear",
    "TestFunctional",
    "default_battery",
    "transfer_check",
    "strong_feller_probe",
    "densities_to_csv",
]

#: paths per batch in Monte Carlo loops
MC_BATCH = 2000

_REACTIONS = {
    "zero": lambda u: np.zeros_like(u),
    "sin": np.sin,
    "-arctan": lambda u: -np.arctan(u),
}


@dataclass(frozen=True)
class NonlinearityG:
    """``G = B^-1 F`` acting on spectral coordinates.

    ``evaluator`` maps states ``(..., n_modes)`` to ``G`` of the same shape.
    ``lipschitz_const``, ``holder_alpha`` and ``growth_const`` are declared
    constants; :meth:`check` tests them on random states.
    """

    evaluator: Callable
    lipschitz_const: float
    holder_alpha: float = 1.0
    growth_const: float = 0.0
    name: str = "custom"
    is_zero: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 0 < self.holder_alpha <= 1:
            raise InvalidInputError("holder_alpha must lie in (0, 1]")
        if self.lipschitz_const < 0 or self.growth_const < 0:
            raise InvalidInputError("declared constants must be nonnegative")

    def __call__(self, x):
        return self.evaluator(x)

    def F(self, model: SpectralModel) -> Callable:
        sq = np.sqrt(model.lambdas)
        return lambda x: sq * self.evaluator(x)

    def check(self, beta, n_modes: int, n_samples: int = 200, space_lambda: float = 0.0, seed: int = 0) -> None:
        """Raise unless linear growth (and, for ``beta > 1/2``, the Holder bound) hold on samples."""
        b = HurstParameter.coerce(beta).beta
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n_samples, n_modes)) * rng.exponential(3.0, (n_samples, 1))
        gx = self.evaluator(x)
        k = max(self.lipschitz_const, self.growth_const)
        if np.any(np.linalg.norm(gx, axis=1) > k * (1 + np.linalg.norm(x, axis=1)) * (1 + 1e-9)):
            raise InvalidInputError(f"{self.name}: linear growth bound with k={k} violated")
        if b > 0.5:
            if not self.holder_alpha > (b - 0.5) / (b - space_lambda):
                raise InvalidInputError(
                    f"{self.name}: Holder exponent {self.holder_alpha} too small for beta={b}"
                )
            y = x + rng.standard_normal(x.shape) * 10.0 ** rng.uniform(-4, 0, (n_samples, 1))
            lhs = np.linalg.norm(gx - self.evaluator(y), axis=1)
            rhs = self.lipschitz_const * np.linalg.norm(x - y, axis=1) ** self.holder_alpha
            if np.any(lhs > rhs * (1 + 1e-9) + 1e-14):
                raise InvalidInputError(f"{self.name}: Holder bound violated")


def nemytskii(model: SpectralModel, f: str | Callable = "sin", n_quad: int | None = None,
              lipschitz: float = 1.0, bound: float | None = None) -> NonlinearityG:
    """Galerkin projection of ``F(x)(xi) = f(x(xi))`` on ``(0, 1)``, basis ``sqrt(2) sin(n pi xi)``.

    Projections use the midpoint rule with ``n_quad`` points (default
    ``8 * n_modes``, at least 64).  ``G = B^-1 F``, so the bound constants
    are divided by ``min sqrt(lambda_n)``.
    """
    name = f if isinstance(f, str) else getattr(f, "__name__", "custom")
    if isinstance(f, str):
        if f not in _REACTIONS:
            raise InvalidInputError(f"unknown reaction {f!r}; known: {sorted(_REACTIONS)}")
        if f == "sin":
            bound = 1.0
        elif f == "-arctan":
            bound = math.pi / 2
        else:
            bound, lipschitz = 0.0, 0.0
        f = _REACTIONS[f]
    N = model.n_modes
    q = n_quad or max(64, 8 * N)
    xi = (np.arange(q) + 0.5) / q
    E = math.sqrt(2.0) * np.sin(np.pi * np.outer(np.arange(1, N + 1), xi))
    inv_sq = 1.0 / np.sqrt(model.lambdas)
    Ew = E.T / q

    def ev(x):
        return (f(np.asarray(x) @ E) @ Ew) * inv_sq

    scale = float(np.max(inv_sq))
    # |F(x) - F(y)| <= |f(u) - f(w)|_{L2} <= L |x - y|; |F(x)| <= sup|f|
    growth = scale * (bound if bound is not None else lipschitz)
    return NonlinearityG(ev, scale * lipschitz, 1.0, growth, name, is_zero=(name == "zero"))


def linear_nonlinearity(model: SpectralModel, c: float) -> NonlinearityG:
    """``F(x) = -c x``, i.e. ``G(x) = -c x / sqrt(lambda)``."""
    inv_sq = 1.0 / np.sqrt(model.lambdas)
    k = abs(c) * float(np.max(inv_sq))
    return NonlinearityG(lambda x: -c * np.asarray(x) * inv_sq, k, 1.0, k, f"linear({c:g})", is_zero=(c == 0))


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True)
class DensitySample:
    log_rho: float
    ito_term: float
    quadratic_term: float
    path_id: int

    @property
    def rho(self) -> float:
        """``exp(log_rho)``; ``inf`` flags overflow (use ``log_rho``)."""
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_rho))

    @property
    def overflow(self) -> bool:
        return not math.isfinite(self.rho)


def _drift_cells(b: float, G: NonlinearityG, Z: np.ndarray, grid: Grid, path_offset: int = 0) -> np.ndarray:
    """Cell values of ``v`` with ``Kbig v = sum_{j<k} G(Z_j) dt``, shape ``(n_paths, n_modes, n)``.

    Uses the explicit inverse of the product-integration matrix with
    fixed-shape row blocks, so a path's result never depends on the batch.
    """
    n = grid.n_steps
    P, M = Z.shape[:2]
    gz = G(np.moveaxis(Z[..., :n], -1, -2))  # (paths, n, modes)
    psi = np.cumsum(gz, axis=1) * grid.dt  # psi at nodes 1..n
    rows = np.moveaxis(psi, 1, 2).reshape(P * M, n)
    v = stable_matmul(rows, cell_integral_inverse(b, grid).T, path_offset * M)
    return v.reshape(P, M, n)


def drift_transform(beta, G: NonlinearityG, Zpath: GridFunction, method: str = "fractional") -> GridFunction:
    """``Kbig^-1`` of the cumulative drift ``int_0^t G(Z_s) ds``, per mode.

    With ``method="fractional"`` the cumulative integral is trapezoidal and
    the inversion formulas are used.  ``method="discrete"`` uses the
    left-point sum and the product-integration matrix, which is what the
    densities use (cell values are placed on left nodes).
    """
    grid = Zpath.grid
    Z = Zpath.values
    if not np.all(np.isfinite(Z)):
        raise NonFiniteError("Z path is not finite")
    gz = np.asarray(G(Z.T)).T  # (modes, n+1)
    psi = np.zeros_like(Z)
    if method == "discrete":
        psi[:, 1:] = np.cumsum(gz[:, :-1], axis=1) * grid.dt
    else:
        psi[:, 1:] = np.cumsum(0.5 * (gz[:, :-1] + gz[:, 1:]), axis=1) * grid.dt
    return invert_Kbig(beta, GridFunction(grid, psi), method=method)


def densities(G: NonlinearityG, ens: OUEnsemble) -> dict:
    """Log densities of every path of a linear ensemble.

    Returns arrays ``log_rho``, ``ito_term``, ``quadratic_term``, ``path_id``.
    """
    b = ens.model.beta.beta
    grid = ens.grid
    dW = ens.noise.white_increments
    if dW.shape[0] != ens.n_paths or not np.array_equal(ens.noise.path_ids, ens.noise.path_offset + np.arange(ens.n_paths)):
        raise GridMismatchError("white increments do not belong to this ensemble")
    if G.is_zero:
        z = np.zeros(ens.n_paths)
        return {"log_rho": z, "ito_term": z.copy(), "quadratic_term": z.copy(), "path_id": ens.noise.path_ids}
    v = _drift_cells(b, G, ens.paths, grid, ens.noise.path_offset)
    ito = np.sum(v * dW, axis=(1, 2))
    quad = 0.5 * grid.dt * np.sum(v * v, axis=(1, 2))
    return {"log_rho": ito - quad, "ito_term": ito, "quadratic_term": quad, "path_id": ens.noise.path_ids}


def density_rho(beta, G: NonlinearityG, ens: OUEnsemble, path: int = 0) -> DensitySample:
    """Density of one path of a linear ensemble (its own white increments are used)."""
    if HurstParameter.coerce(beta) != ens.model.beta:
        raise GridMismatchError("beta differs from the ensemble's")
    sub = OUEnsemble(ens.model, ens.grid, ens.paths[path : path + 1], _noise_slice(ens.noise, path), ens.initial)
    d = densities(G, sub)
    return DensitySample(float(d["log_rho"][0]), float(d["ito_term"][0]), float(d["quadratic_term"][0]),
                         int(d["path_id"][0]))


def _noise_slice(noise, i: int):
    from dataclasses import replace

    return replace(noise, paths=noise.paths[i : i + 1], normals=noise.normals[i : i + 1],
                   path_offset=noise.path_offset + i)


def classical_density(G: NonlinearityG, ens: OUEnsemble) -> np.ndarray:
    """Brownian case: ``log rho = sum G(Z_k) dB_k - 1/2 sum |G(Z_k)|^2 dt`` from the path increments."""
    if not ens.model.beta.is_standard:
        raise InvalidInputError("the classical density needs beta = 1/2")
    dB = np.diff(ens.noise.paths, axis=2)
    n = ens.grid.n_steps
    g = np.stack([G(ens.paths[:, :, k]) for k in range(n)], axis=2)
    return np.sum(g * dB, axis=(1, 2)) - 0.5 * ens.grid.dt * np.sum(g * g, axis=(1, 2))


def densities_to_csv(d: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path_id", "log_rho", "ito_term", "quadratic_term"])
    for i in range(len(d["log_rho"])):
        w.writerow([int(d["path_id"][i]), repr(float(d["log_rho"][i])), repr(float(d["ito_term"][i])),
                    repr(float(d["quadratic_term"][i]))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulation


def _linear_pair(model, G, x, grid, seed, n_paths, path_offset, max_elements):
    x = _check_dims(model, grid, x)
    noise = sample_fbm_kernel(model.beta, grid, model.n_modes, n_paths, seed, path_offset, max_elements)
    dB = np.diff(noise.paths, axis=2)
    Z, _ = ou_recursion(model, grid, x, dB)
    return noise, dB, Z


def simulate_semilinear(model: SpectralModel, G: NonlinearityG, x, grid: Grid, seed, n_paths: int,
                        path_offset: int = 0, max_elements: int = DEFAULT_MAX_ELEMENTS):
    """Exponential-Euler paths of ``dX = (A X + B G(X)) dt + B dW^beta``.

    Uses the fBm increments of :func:`simulate_ou` with the same seed, so
    ``G = 0`` reproduces it bit for bit.  Returns the ensemble and a per-path
    flag that is False where the state norm exceeded 1e12 (the path is NaN
    from there on).
    """
    x = _check_dims(model, grid, x)
    noise = sample_fbm_kernel(model.beta, grid, model.n_modes, n_paths, seed, path_offset, max_elements)
    dB = np.diff(noise.paths, axis=2)
    drift = None if G.is_zero else G.F(model)
    X, alive = ou_recursion(model, grid, x, dB, drift)
    return OUEnsemble(model, grid, X, noise, x), alive


# ---------------------------------------------------------------------------
# transfer identity and strong Feller probe


@dataclass(frozen=True)
class TestFunctional:
    __test__ = False  # not a pytest class

    name: str
    func: Callable
    bound: float

    def __call__(self, z):
        out = self.func(z)
        if np.any(np.abs(out) > self.bound * (1 + 1e-12)):
            raise InvalidInputError(f"{self.name} exceeds its declared bound {self.bound}")
        return out


def default_battery() -> tuple:
    """Three bounded functionals of the terminal state (spectral coordinates)."""

    def soft_halfspace(z):
        return 0.5 * (1 + np.tanh((z[:, 0] - 0.5 * z[:, 1] - 0.2) / 0.2))

    return (
        TestFunctional("tanh(z1)", lambda z: np.tanh(z[:, 0]), 1.0),
        TestFunctional("halfspace(z1-z2/2>0.2)", soft_halfspace, 1.0),
        TestFunctional("exp(-|z|^2/2)", lambda z: np.exp(-0.5 * np.sum(z * z, axis=1)), 1.0),
    )


def _mean_se(sums: np.ndarray, sq: np.ndarray, n: int):
    mean = sums / n
    var = np.maximum(sq / n - mean**2, 0.0) * n / max(n - 1, 1)
    return mean, np.sqrt(var / n)


def transfer_check(model: SpectralModel, G: NonlinearityG, x, phis=None, n_paths: int = 20000,
                   n_steps: int = 400, seed=0, batch: int = MC_BATCH) -> dict:
    """Both sides of ``E phi(X_T) = E phi(Z_T) rho`` by Monte Carlo.

    ``X`` and ``Z`` are driven by the same noise.  ``combined_se`` is
    ``sqrt(se_lhs^2 + se_rhs^2)``, conservative for positively correlated
    estimators.  Also reports ``mean(rho)`` with its standard error.
    """
    phis = tuple(phis or default_battery())
    grid = Grid(model.T, n_steps)
    seed = NoiseSeed.coerce(seed)
    k = len(phis)
    acc = np.zeros((4, k))  # sum lhs, sumsq lhs, sum rhs, sumsq rhs
    rho_acc = np.zeros(2)
    blowups = 0
    done = 0
    while done < n_paths:
        m = min(batch, n_paths - done)
        noise, dB, Z = _linear_pair(model, G, x, grid, seed, m, done, DEFAULT_MAX_ELEMENTS)
        drift = None if G.is_zero else G.F(model)
        X, alive = ou_recursion(model, grid, np.asarray(x, float), dB, drift)
        blowups += int(np.sum(~alive))
        ens = OUEnsemble(model, grid, Z, noise, np.asarray(x, float))
        rho = np.exp(densities(G, ens)["log_rho"])
        rho_acc += [rho.sum(), (rho * rho).sum()]
        for i, phi in enumerate(phis):
            a = phi(X[:, :, -1])
            c = phi(Z[:, :, -1]) * rho
            acc[:, i] += [a.sum(), (a * a).sum(), c.sum(), (c * c).sum()]
        done += m
    lhs, se_l = _mean_se(acc[0], acc[1], n_paths)
    rhs, se_r = _mean_se(acc[2], acc[3], n_paths)
    rm, rse = _mean_se(rho_acc[0], rho_acc[1], n_paths)
    comb = np.sqrt(se_l**2 + se_r**2)
    return {
        "beta": model.beta.beta,
        "nonlinearity": G.name,
        "n_paths": n_paths,
        "n_steps": n_steps,
        "blowups": blowups,
        "mean_rho": float(rm),
        "mean_rho_se": float(rse),
        "functionals": [
            {"name": p.name, "lhs": float(lhs[i]), "lhs_se": float(se_l[i]), "rhs": float(rhs[i]),
             "rhs_se": float(se_r[i]), "combined_se": float(comb[i]),
             "z": float((lhs[i] - rhs[i]) / comb[i]) if comb[i] > 0 else 0.0}
            for i, p in enumerate(phis)
        ],
    }


def strong_feller_probe(model: SpectralModel, G: NonlinearityG, x, direction, levels: int = 5,
                        phis=None, n_paths: int = 4000, n_steps: int = 200, seed=0,
                        batch: int = MC_BATCH) -> dict:
    """Coupled differences along ``x_j = x + 2^-j d``, ``j = 0 .. levels-1``.

    For each ``j`` reports ``E|rho(x_j) - rho(x)|`` and, for each test
    functional, ``|E phi(Z(x_j)) rho(x_j) - E phi(Z(x)) rho(x)|``, all with
    the same noise.  ``monotone`` is True if the isotonic (nonincreasing)
    fit stays within 2 standard errors of the sequence; ``tail_mass`` is the
    fraction of paths with ``rho > K`` at the base point.
    """
    phis = tuple(phis or default_battery())
    x = np.asarray(x, dtype=float)
    d = np.asarray(direction, dtype=float)
    grid = Grid(model.T, n_steps)
    seed = NoiseSeed.coerce(seed)
    decay = np.exp(-np.outer(model.alphas, grid.nodes))  # (modes, n+1)
    k = len(phis)
    drho = np.zeros((2, levels))
    dphi = np.zeros((levels, k))
    base_phi = np.zeros(k)
    quad = np.zeros(levels + 1)
    tails = {K: 0 for K in (2.0, 5.0, 10.0)}
    done = 0
    while done < n_paths:
        m = min(batch, n_paths - done)
        noise, dB, Z0 = _linear_pair(model, G, np.zeros_like(x), grid, seed, m, done, DEFAULT_MAX_ELEMENTS)

        def rho_at(y):
            ens = OUEnsemble(model, grid, Z0 + y[:, None] * decay, noise, y)
            dd = densities(G, ens)
            return np.exp(dd["log_rho"]), ens.paths[:, :, -1], dd["quadratic_term"]

        r0, zT, q0 = rho_at(x)
        quad[0] += q0.sum()
        for K in tails:
            tails[K] += int(np.sum(r0 > K))
        p0 = np.stack([p(zT) * r0 for p in phis], axis=1)
        base_phi += p0.sum(axis=0)
        for j in range(levels):
            rj, zj, qj = rho_at(x + 2.0**-j * d)
            diff = np.abs(rj - r0)
            drho[:, j] += [diff.sum(), (diff * diff).sum()]
            dphi[j] += (np.stack([p(zj) * rj for p in phis], axis=1) - p0).sum(axis=0)
            quad[j + 1] += qj.sum()
        done += m
    mean, se = _mean_se(drho[0], drho[1], n_paths)
    fit = isotonic_regression(mean, increasing=False).x
    monotone = bool(np.all(np.abs(fit - mean) <= 2 * np.maximum(se, 1e-300)))
    ratio = float(mean[-1] / mean[0]) if mean[0] > 0 else 0.0
    return {
        "beta": model.beta.beta,
        "nonlinearity": G.name,
        "n_paths": n_paths,
        "offsets": [2.0**-j for j in range(levels)],
        "mean_abs_drho": mean.tolist(),
        "se": se.tolist(),
        "phi_differences": (np.abs(dphi) / n_paths).tolist(),
        "phi_names": [p.name for p in phis],
        "mean_quadratic_term": (quad / n_paths).tolist(),
        "tail_mass": {str(K): v / n_paths for K, v in tails.items()},
        "monotone": monotone,
        "final_over_initial": ratio,
    }


def report_json(rec: dict) -> str:
    return json.dumps(rec, indent=2, sort_keys=True)
