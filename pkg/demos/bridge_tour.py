"""
A single deadline: simulating and fitting the bridge
=====================================================

The node difference drifts like a mean-reverting process until the decay
start, then its level and volatility shrink with the time left, and it is
pinned to zero at the deadline.
"""

import numpy as np

from ttt import rdcm
from ttt.designs import single_deadline
from ttt.diagnostics import ks_normal

p = single_deadline()
print(f"decay starts at t={p.tau:.3f}y, deadline at T={p.deadline_T:.3f}y")

# the volatility profile is flat before tau and decays to zero at T
w = np.array([3.0, p.deadline_T - p.tau, 1.0, 0.25, 0.01])
print("g(T - t):", np.round(rdcm.g_vol(w, p.theta_minus, p.theta_plus, p.tau, p.deadline_T), 4))

# a daily path that runs all the way to the deadline ends exactly at zero
grid = np.r_[np.arange(0.0, p.deadline_T, 1 / 252), p.deadline_T]
path = rdcm.simulate_path(p, p.b_minus, grid, seed=1)
print(f"{grid.size} dates, X_0={path[0]:.4f}, X_T={path[-1]}")

# conditional law of X_t given X_s and the pin: mean k and variance v * R
law = rdcm.bridge_law(path[2000], grid[2000], grid[2000] + 0.5, p)
print(f"k={float(law.mean_k):.5f}  sigma2={float(law.variance_sigma2):.3e}  "
      f"R={float(law.ratio_R):.4f}")

# fit on the last 800 business days before a small guard ahead of T
window = slice(grid.size - 820, grid.size - 20)
series = (grid[window], path[window])
start = p.with_values(a=5.0, b_minus=0.02, theta_minus=0.4, theta_plus=1.5)
fit = rdcm.fit_rdcm(series, start, config={"n_starts": 4, "seed": 0})
for name in rdcm.PARAM_NAMES:
    print(f"  {name:12s} true {getattr(p, name):8.4f}   fitted {getattr(fit.params, name):8.4f}")
print(f"loglik {fit.loglik:.2f}, AIC {fit.aic:.2f}, on boundary: {fit.on_boundary}")

# standardized one-step residuals should look like N(0, 1)
z = rdcm.rdcm_residuals(series, fit.params)
res = ks_normal(z)
print(f"KS D={res.statistic_D:.4f}, p={res.p_value:.3f}")
