"""
Fractional Brownian motion and the stochastic convolution
=========================================================

Paths come from the Volterra representation with addressable random
streams, so any batch of an ensemble can be regenerated on its own.
"""

import numpy as np

from fracnull.grid import Grid
from fracnull.noise import fbm_covariance, sample_fbm_kernel
from fracnull.spectral import covariance_qn, empirical_covariance, heat_dirichlet, holder_exponent, simulate_ou

g = Grid(1.0, 512)
ps = sample_fbm_kernel(0.3, g, n_modes=1, n_paths=4000, seed=0)
B1 = ps.paths[:, 0, -1]
Bh = ps.paths[:, 0, 256]
print("Var B(1)        ", B1.var(), " exact", fbm_covariance(0.3, 1.0, 1.0))
print("Cov B(1/2),B(1) ", np.mean(B1 * Bh), " exact", fbm_covariance(0.3, 0.5, 1.0))

# roughness: the Holder exponent tracks beta
for beta in (0.25, 0.75):
    big = Grid(1.0, 4096)
    h = holder_exponent(sample_fbm_kernel(beta, big, 1, 16, seed=1).paths, big)
    print(f"beta={beta}: median Holder exponent {np.median(h):.3f}")

# heat equation modes: Monte Carlo variance against q_n
model = heat_dirichlet(4, 0.25)
ens = simulate_ou(model, Grid(1.0, 1024), np.zeros(4), 2000, seed=0)
q, se = empirical_covariance(ens)
for n in range(1, 5):
    qn = covariance_qn(model, n)
    print(f"mode {n}: q_n {qn:.5f}  empirical {q[n - 1]:.5f} +- {se[n - 1]:.5f}")
