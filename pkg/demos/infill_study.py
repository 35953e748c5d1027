"""
Infill asymptotics: what a fixed window can and cannot identify
================================================================

Sampling a fixed window more densely pins down the volatility level. The
post-decay shape is only learnable when the window reaches past tau.
"""

import numpy as np

from ttt import infill, rdcm
from ttt.designs import single_deadline

p = single_deadline()
theta0 = (p.theta_minus, p.theta_plus)
n_list = [250, 1000, 4000]

# a window that crosses tau: both volatility parameters are visible
res = infill.rdcm_consistency_experiment(theta0, p, n_list, 20, seed=1)
print("window [0, T - 0.25]")
for entry in res.summary["by_n"]:
    print(f"  n={entry['n']:5d}  median |err| theta- {entry['theta_minus']['median_abs_error']:.4f}"
          f"  theta+ {entry['theta_plus']['median_abs_error']:.4f}")

# a window that stops before tau: the data say nothing about theta+
pre = infill.rdcm_consistency_experiment(theta0, p, n_list, 20, seed=2, l=p.tau - 0.5)
print("window [0, tau - 0.5]")
for entry in pre.summary["by_n"]:
    print(f"  n={entry['n']:5d}  median |err| theta- {entry['theta_minus']['median_abs_error']:.4f}"
          f"  theta+ spread {entry['theta_plus']['spread_iqr']:.3f}")

grid = infill.InfillGrid(0.0, p.tau - 0.5, 2000)
x = rdcm.simulate_path(p, p.b_minus, grid.times, seed=3)
data_range, full_range = infill.flatness_in_theta_plus(
    (grid.times, x), theta0[0], np.linspace(0.2, 4.0, 41), p)
print(f"range of the data part in theta+: {data_range:.1e}; with the pin term: {full_range:.1e}")

# the limit contrast peaks at the truth
for th in [(0.18, 1.0), theta0, (0.26, 1.0), (0.218, 2.0)]:
    val = infill.limit_contrast(th, theta0, 0.0, p.deadline_T - 0.25, p)
    print(f"  M_inf{th} = {val:.5f}")
