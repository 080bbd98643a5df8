"""
Equivalence criterion and null controls
=======================================

The per-mode quantity alpha^(2 beta) e^(-2 alpha T) / lambda decides whether
the transition laws are equivalent.  Null controls give a second view:
equivalence needs a control of finite fBm-integrand norm.
"""

import numpy as np

from fracnull.control import MomentProblem, explicit_control, hstar_norm, moment_solve, verify_steering
from fracnull.spectral import build_model, equivalence_report, heat_dirichlet

heat = heat_dirichlet(32, 0.75)
rep = equivalence_report(heat)
print("heat, beta=0.75:", rep.verdict, "| scaled q_n band", rep.bounds)

# criterion verdict against the explicit control, on models where they agree
n16 = np.arange(1, 17.0)
for label, m in (
    ("heat, beta=0.75", heat),
    ("alpha=n, lambda=e^-4n", build_model(n16, np.exp(-4 * n16), 0.75, 1.0)),
):
    x = np.arange(1, m.n_modes + 1.0) ** -0.6
    u = hstar_norm(0.75, explicit_control(m, x))
    print(f"{label}: criterion {equivalence_report(m).verdict}, control norm {u.hstar_flag}")

# the explicit control is one admissible control, not the cheapest one: its
# norm can diverge although the laws are equivalent
n = np.arange(1, 65, dtype=float)
alphas = (np.pi * n) ** 2
for label, lam in (("lambda = alpha^0.1", alphas**0.1), ("lambda = alpha^-1.5", alphas**-1.5)):
    m = build_model(alphas, lam, 0.75, 1.0)
    x = n**-0.6
    u = hstar_norm(0.75, explicit_control(m, x))
    print(f"{label}: control norm {u.hstar_flag}")
    for level, val in u.trace:
        print(f"    {level:10s} {val:.4g}")
    print(f"    steering residual {verify_steering(m, x, u):.1e}")

# an exponential moment problem, solved in the minimum-norm sense
lam = np.pi**2 * np.arange(1, 9) ** 2
sol = moment_solve(MomentProblem(lam, 1.0 / np.arange(1, 9), 1.0, 8))
print("moment problem: condition", f"{sol.condition:.2e}", " max residual", f"{np.abs(sol.residuals).max():.1e}")
