"""Envelope estimates at the midpoint of two-point data sets.

A jump along the temporal cone relaxes to zero; for the mixed jump the
search finds no improvement, which is evidence only (the estimate is an
upper bound).
"""

import numpy as np

from afree.grid import make_grid
from afree.integrands import DataSet, datadriven_integrand, envelope_estimate
from afree.symbols import builtin

pair = builtin("fluid-d2")
g = make_grid(2, 8, 8)

for label, jump_e, jump_s in (("strain jump", [1.0, 0.0], [0.0, 0.0]),
                              ("mixed jump", [1.0, 0.0], [1.0, 0.0])):
    a, b = np.array(jump_e), np.array(jump_s)
    f = datadriven_integrand(DataSet(np.stack([a, -a]), np.stack([b, -b]), 2.0))
    res = envelope_estimate(f, pair, np.zeros(2), np.zeros(2), g, budget=200, starts=1)
    print(f"{label:12s} f(0)={res.base_value:.3f} envelope <= {res.value:.3e}")
