import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import kolmogorov

from ttt import rdcm
from ttt.designs import single_deadline, two_deadlines
from ttt.diagnostics import (
    aic, flatten_params, kolmogorov_sf, ks_normal, parametric_bootstrap,
)
from ttt.errors import BootstrapError, DomainError, FitError


def test_ks_three_points():
    res = ks_normal([-1.0, 0.0, 1.0])
    # brute force over the step function: 1/3 - Phi(-1)
    assert res.statistic_D == pytest.approx(1 / 3 - 0.15865525393145707, abs=1e-12)
    assert res.statistic_D == pytest.approx(0.174678, abs=1e-6)
    assert 0 <= res.p_value <= 1 and res.n == 3


def test_ks_degenerate_and_errors():
    assert ks_normal(np.full(20, 0.3)).statistic_D >= 0.5
    with pytest.raises(DomainError):
        ks_normal([0.1])
    with pytest.raises(DomainError):
        ks_normal([0.1, np.nan])


@pytest.mark.parametrize("lam", [0.05, 0.3, 0.6, 0.9, 0.99, 1.0, 1.2, 1.36, 2.0, 4.0])
def test_kolmogorov_sf_matches_reference(lam):
    assert kolmogorov_sf(lam) == pytest.approx(kolmogorov(lam), abs=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=40), st.randoms())
def test_ks_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert ks_normal(values) == ks_normal(shuffled)


def test_ks_size_on_normal_samples():
    rejections = [ks_normal(np.random.default_rng(s).standard_normal(1000)).p_value < 0.05
                  for s in range(300)]
    assert 0.02 <= np.mean(rejections) <= 0.09


def test_aic():
    assert aic(100, 4) == -192
    assert aic(0, 1) == 2
    assert aic(10.0, 3) < aic(9.0, 3)
    with pytest.raises(DomainError):
        aic(1.0, -1)


def test_flatten_names():
    names = flatten_params(two_deadlines())
    assert "theta_minus_2" in names and "p_12" in names and len(names) == 14


def _theta_only(series, init):
    mask = {n: n != "theta_minus" for n in rdcm.PARAM_NAMES}
    return rdcm.fit_rdcm(series, init, fixed_mask=mask,
                         config={"warm_start": True, "n_starts": 1})


def test_bootstrap_single_replication_and_determinism():
    truth = single_deadline()
    one = parametric_bootstrap(truth, 200, fitter=_theta_only, n_reps=1, seed=4)
    assert one.sd_undefined and all(v == 0.0 for v in one.sd.values())
    a = parametric_bootstrap(truth, 200, fitter=_theta_only, n_reps=6, seed=4)
    b = parametric_bootstrap(truth, 200, fitter=_theta_only, n_reps=6, seed=4)
    assert a.to_dict() == b.to_dict()
    assert a.n_replications == 6 and a.failures == 0
    assert all(v >= 0 for v in a.sd.values())


def test_bootstrap_parallel_matches_serial():
    truth = single_deadline()
    serial = parametric_bootstrap(truth, 150, fitter=_theta_only, n_reps=4, seed=9)
    pooled = parametric_bootstrap(truth, 150, fitter=_theta_only, n_reps=4, seed=9,
                                  n_workers=2)
    assert serial.to_dict() == pooled.to_dict()


def _flaky(series, init):
    if series[1][1] > series[1][0]:
        raise FitError("refused")
    return _theta_only(series, init)


def _always_fails(series, init):
    raise FitError("refused")


def test_bootstrap_failures_counted():
    truth = single_deadline()
    rep = parametric_bootstrap(truth, 100, fitter=_flaky, n_reps=10, seed=2)
    assert rep.failures > 0 and rep.n_replications + rep.failures == 10
    with pytest.raises(BootstrapError):
        parametric_bootstrap(truth, 100, fitter=_always_fails, n_reps=3, seed=2)
    with pytest.raises(DomainError):
        parametric_bootstrap(truth, 100, n_reps=0)


def test_bootstrap_sd_scales_with_length():
    truth = single_deadline()
    sd = [parametric_bootstrap(truth, n, fitter=_theta_only, n_reps=200, seed=11,
                               names=("theta_minus",)).sd["theta_minus"] for n in (500, 1000)]
    assert sd[1] / sd[0] == pytest.approx(1 / np.sqrt(2), rel=0.25)
