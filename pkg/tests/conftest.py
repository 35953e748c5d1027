import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ttt.rdcm import RdcmParams

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_rdcm(rng, tau=None, deadline_T=None):
    """A parameter draw inside the default box with a random frame."""
    T = deadline_T if deadline_T is not None else rng.uniform(2.0, 12.0)
    t = tau if tau is not None else rng.uniform(0.2, 0.9) * T
    return RdcmParams(a=rng.uniform(0.2, 40.0), b_minus=rng.uniform(-0.1, 0.1),
                      b_plus=rng.uniform(0.3, 3.0), theta_minus=rng.uniform(0.01, 0.5),
                      theta_plus=rng.uniform(0.3, 3.0), tau=t, deadline_T=T)


# drift/volatility blocks of the reference calibrations
DESIGN_BLOCKS = ((18.3233, 0.0489, 1.0, 0.2180, 1.0033),
                 (33.9943, 0.0755, 1.0033, 0.3836, 1.0058),
                 (7.0034, 0.0363, 0.9918, 0.1002, 0.9969))


def design_rdcm(rng):
    """A reference block with every entry rescaled by a factor in [1/2, 2]."""
    a, b, bp, tm, tp = DESIGN_BLOCKS[rng.integers(len(DESIGN_BLOCKS))]
    f = lambda: float(np.exp(rng.uniform(-np.log(2), np.log(2))))
    T = rng.uniform(2.0, 12.0)
    return RdcmParams(a * f(), b * f() * rng.choice([-1.0, 1.0]), bp * f(), tm * f(), tp * f(),
                      tau=rng.uniform(0.1, 0.9) * T, deadline_T=T)


def daily_window(rng, params, max_n=1000, step=1 / 252):
    """A daily stretch of random length and position ending before the guard."""
    hi = params.deadline_T - 1 / 3650
    n = min(int(rng.integers(2, max_n)), int(hi / step) - 1)
    start = rng.uniform(0.0, hi - n * step)
    return start + step * np.arange(n + 1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def quotes_csv(tmp_path):
    """Three complete quartets plus one date missing its long green leg."""
    rows = ["quote_date,isin,label,maturity_date,discount_factor"]
    data = {
        "2021-09-08": (0.99, 0.991, 0.95, 0.952),
        "2021-09-09": (0.989, 0.9905, 0.949, 0.9515),
        "2021-09-10": (0.9895, 0.9895, 0.948, 0.948),
    }
    for d, (bs, gs, bl, gl) in data.items():
        rows += [f"{d},DE0001,brown,2025-08-15,{bs}", f"{d},DE0002,green,2025-08-15,{gs}",
                 f"{d},DE0003,brown,2030-08-15,{bl}", f"{d},DE0004,green,2030-08-15,{gl}"]
    rows += ["2021-09-13,DE0001,brown,2025-08-15,0.99", "2021-09-13,DE0002,green,2025-08-15,0.99",
             "2021-09-13,DE0003,brown,2030-08-15,0.95"]
    path = tmp_path / "quotes.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path, data
