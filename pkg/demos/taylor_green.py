"""Decay of a Taylor-Green vortex for a Newtonian and a shear-thickening fluid."""

import numpy as np

from afree.flow import energy_report, solve_regularized, taylor_green, taylor_green_amplitude
from afree.grid import make_grid
from afree.integrands import ConstitutiveLaw

g = make_grid(2, 100, 32, T=0.1)
u0 = taylor_green(g)

newt = solve_regularized(ConstitutiveLaw(2.0, mu0=0.01), 0.0, u0, g)
amp = np.array([taylor_green_amplitude(u) for u in newt.u])
exact = np.exp(-4 * np.pi ** 2 * 0.01 * newt.times)
print("t        amplitude    closed form")
for n in range(0, g.Nt + 1, 20):
    print(f"{newt.times[n]:.3f}   {amp[n]:.8f}   {exact[n]:.8f}")

thick = solve_regularized(ConstitutiveLaw(3.0, mu0=0.01), 0.05, u0, g)
tr = energy_report(thick)
print("\np=3: kinetic energy", tr.kinetic[0], "->", tr.kinetic[-1])
print("max energy balance residual", np.max(np.abs(tr.balance_residual)))
