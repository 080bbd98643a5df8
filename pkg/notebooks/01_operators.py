"""
Fractional operators on a grid
==============================

The transfer operator Kbig maps a Brownian-type integrand to the fBm
integrand.  Powers of t are eigen-like for it, which gives a closed form to
compare against.
"""

import numpy as np

from fracnull.fractional import apply_Kbig, hnorm, hnorm_oracle, invert_Kbig, kbig_power_coefficient
from fracnull.grid import Grid, GridFunction

g = Grid(1.0, 1024)
t = g.nodes

# Kbig[s^mu] = C(mu) t^(mu + beta + 1/2)
for beta in (0.25, 0.75):
    mu = 0.3
    f = GridFunction.from_callable(g, lambda s: s**mu)
    out = apply_Kbig(beta, f).values[0]
    exact = kbig_power_coefficient(beta, mu) * t ** (mu + beta + 0.5)
    print(f"beta={beta}: max |Kbig s^0.3 - closed form| = {np.max(np.abs(out - exact)):.2e}")

# round trip through the inverse
psi = GridFunction.from_callable(g, lambda s: np.sin(3 * s) * s)
for beta in (0.25, 0.75):
    back = apply_Kbig(beta, invert_Kbig(beta, psi)).values[0]
    print(f"beta={beta}: round-trip error {np.max(np.abs(back - psi.values[0])):.2e}")

# two routes to the fBm-integrand norm of e^(-2t)
phi = GridFunction.from_callable(g, lambda s: np.exp(-2 * s))
for beta in (0.3, 0.7):
    print(f"beta={beta}: transfer route {hnorm(beta, phi):.6f}  double integral {hnorm_oracle(beta, phi):.6f}")
