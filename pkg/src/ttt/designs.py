"""Reference parameter sets for simulation studies.

Both designs live on the German twin-bond calendar: the series epoch is
2021-09-08, the near deadline is 2031-01-01 with decay from 2029-09-08, the
far deadline 2041-01-01 with decay from 2036-09-04. Parameter values are
the calibrated estimates reported for the 2025/2030 node difference.
"""

from datetime import date

import numpy as np

from .market_data import year_fraction
from .rdcm import RdcmParams
from .srdcm import SrdcmParams

EPOCH = date(2021, 9, 8)
NEAR_DEADLINE = date(2031, 1, 1)
NEAR_TAU = date(2029, 9, 8)
FAR_DEADLINE = date(2041, 1, 1)
FAR_TAU = date(2036, 9, 4)


def frame(tau_date, deadline_date, epoch=EPOCH):
    """Placeholder regime carrying only ``tau`` and ``deadline_T`` (in years from ``epoch``)."""
    return RdcmParams(a=1.0, b_minus=0.0, b_plus=1.0, theta_minus=0.1, theta_plus=1.0,
                      tau=year_fraction(epoch, tau_date),
                      deadline_T=year_fraction(epoch, deadline_date))


def single_deadline():
    """One-regime bridge toward the near deadline (``b_plus`` pinned at 1)."""
    return frame(NEAR_TAU, NEAR_DEADLINE).with_values(
        a=18.3233, b_minus=0.0489, b_plus=1.0, theta_minus=0.2180, theta_plus=1.0033)


def two_deadlines(delta_bar=1.0 / 365.0, pi0=(0.5, 0.5)):
    """Switching design: volatile near-deadline regime, calm far-deadline regime."""
    near = frame(NEAR_TAU, NEAR_DEADLINE).with_values(
        a=33.9943, b_minus=0.0755, b_plus=1.0033, theta_minus=0.3836, theta_plus=1.0058)
    far = frame(FAR_TAU, FAR_DEADLINE).with_values(
        a=7.0034, b_minus=0.0363, b_plus=0.9918, theta_minus=0.1002, theta_plus=0.9969)
    P = np.array([[0.8928, 0.1072],
                  [0.0457, 0.9543]])
    return SrdcmParams((near, far), np.asarray(pi0, float), P, delta_bar)
