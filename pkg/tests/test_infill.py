import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import simpson
from scipy.linalg import expm

from conftest import design_rdcm
from ttt import infill, rdcm, srdcm
from ttt.designs import single_deadline
from ttt.errors import DomainError, RangeError
from ttt.infill import (
    InfillGrid, SwitchPath, contrast_mn, count_inversions, flatness_in_theta_plus,
    limit_contrast, pathwise_limit_contrast, rdcm_consistency_experiment, simulate_ctmc,
    stationary_distribution, switching_conditional_contrast, switching_consistency_experiment,
    transition_matrix,
)
from ttt.rdcm import RdcmParams

seeds = st.integers(0, 2 ** 32 - 1)
F1 = RdcmParams(5.0, 0.05, 1.0, 0.3836, 1.0058, tau=2.0, deadline_T=4.0)
F2 = RdcmParams(3.0, 0.02, 1.0, 0.1002, 0.9969, tau=2.6, deadline_T=5.0)


def test_grid():
    g = InfillGrid(0.5, 2.5, 400)
    assert g.delta_n == 0.005 and g.times[-1] == pytest.approx(2.5)
    g.check(3.0)
    with pytest.raises(RangeError):
        g.check(2.5)
    with pytest.raises(DomainError):
        InfillGrid(1.0, 1.0, 3)


@given(seeds)
def test_contrast_identity_with_loglik(seed):
    rng = np.random.default_rng(seed)
    frame = design_rdcm(rng)
    l = rng.uniform(0.3, 0.95) * frame.deadline_T
    grid = InfillGrid(0.0, l, int(rng.integers(20, 600)))
    x = rdcm.simulate_path(frame, frame.b_minus, grid.times, seed)
    theta = (frame.theta_minus * rng.uniform(0.5, 2), frame.theta_plus * rng.uniform(0.5, 2))
    params = frame.with_values(theta_minus=theta[0], theta_plus=theta[1])
    ll = rdcm.bridge_loglik((grid.times, x), params)
    mn = contrast_mn((grid.times, x), theta, frame)
    assert mn == pytest.approx(ll / grid.n + 0.5 * math.log(2 * math.pi * grid.delta_n),
                               abs=1e-10)
    # the profile route used by the experiments gives the same number
    k, c = infill._scaled_step_terms(grid.times, x, frame, theta[1])
    u = theta[0] ** -2
    assert k.mean() + 0.5 * math.log(u) - u * c.mean() == pytest.approx(mn, abs=1e-10)


def test_contrast_and_loglik_share_argmax():
    frame = single_deadline()
    grid = InfillGrid(0.0, 9.0, 800)
    x = rdcm.simulate_path(frame, frame.b_minus, grid.times, 3)
    thetas = [(tm, tp) for tm in np.linspace(0.1, 0.4, 7) for tp in np.linspace(0.5, 2, 7)]
    mn = [contrast_mn((grid.times, x), th, frame) for th in thetas]
    ll = [rdcm.bridge_loglik((grid.times, x), frame.with_values(theta_minus=a, theta_plus=b))
          for a, b in thetas]
    assert np.argmax(mn) == np.argmax(ll)


def test_pre_tau_flatness():
    frame = single_deadline()
    grid = InfillGrid(0.0, frame.tau - 0.5, 1000)
    x = rdcm.simulate_path(frame, frame.b_minus, grid.times, 12)
    data_range, full_range = flatness_in_theta_plus((grid.times, x), 0.22,
                                                    np.linspace(0.1, 4.0, 41), frame)
    assert data_range <= 1e-12
    assert 0 < full_range < 10.0 / grid.n


def test_limit_contrast_shape_and_closed_form():
    frame = single_deadline()
    theta0 = (0.218, 1.0033)
    l = frame.deadline_T - 0.25
    grid = [(a, b) for a in np.linspace(0.1, 0.4, 13) for b in np.linspace(0.5, 2.0, 13)]
    grid.append(theta0)
    vals = [limit_contrast(th, theta0, 0.0, l, frame) for th in grid]
    assert np.argmax(vals) == len(grid) - 1
    # constant volatility window
    for tm in (0.1, 0.218, 0.5):
        got = limit_contrast((tm, 2.0), theta0, 0.0, frame.tau - 1, frame)
        assert got == pytest.approx(-0.5 * (math.log(tm ** 2) + theta0[0] ** 2 / tm ** 2),
                                    abs=1e-14)


def test_limit_contrast_vs_quadrature():
    frame = single_deadline()
    theta, theta0 = (0.3, 1.7), (0.218, 1.0033)
    t0, l = 5.0, frame.deadline_T - 0.05

    def integrand(u):
        w = frame.deadline_T - u
        g2 = rdcm.g_vol(w, theta[0], theta[1], frame.tau, frame.deadline_T) ** 2
        g02 = rdcm.g_vol(w, theta0[0], theta0[1], frame.tau, frame.deadline_T) ** 2
        return np.log(g2) + g02 / g2

    # a node sits on the kink at tau
    total = 0.0
    for lo, hi in ((t0, frame.tau), (frame.tau, l)):
        u = np.linspace(lo, hi, 200_001)
        total += simpson(integrand(u), x=u)
    oracle = -total / (2 * (l - t0))
    assert limit_contrast(theta, theta0, t0, l, frame) == pytest.approx(oracle, abs=1e-10)


def test_transition_matrix():
    Q = np.array([[-2.0, 2.0], [1.0, -1.0]])
    for dt in (1e-6, 1e-3, 0.1, 3.0):
        P = transition_matrix(Q, dt)
        np.testing.assert_allclose(P, expm(Q * dt), rtol=0, atol=1e-13)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-15)
    # truncated series oracle at small Q dt
    dt = 1e-4
    A = Q * dt
    series = np.eye(2) + A + A @ A / 2 + A @ A @ A / 6 + A @ A @ A @ A / 24
    np.testing.assert_allclose(transition_matrix(Q, dt), series, rtol=0, atol=1e-12)
    Q3 = np.array([[-1.0, 0.5, 0.5], [0.2, -0.3, 0.1], [1.0, 1.0, -2.0]])
    np.testing.assert_allclose(transition_matrix(Q3, 0.7), expm(Q3 * 0.7), atol=1e-14)
    np.testing.assert_allclose(stationary_distribution(Q), [1 / 3, 2 / 3], atol=1e-14)
    with pytest.raises(DomainError):
        transition_matrix(np.array([[-1.0, 1.0], [0.0, 0.0]]), 1.0)


def test_ctmc_occupation_and_switch_cells():
    Q = np.array([[-2.0, 2.0], [1.0, -1.0]])
    rng = np.random.default_rng(0)
    occ, counts = [], []
    grid = np.linspace(0.0, 5.0, 2001)
    for _ in range(400):
        path = simulate_ctmc(Q, 0.0, 5.0, rng)
        d = np.diff(path.edges)
        occ.append(d[path.regime_labels == 1].sum() / 5.0)
        counts.append(path.n_switches)
        cells = path.switch_cells(grid)
        assert cells.size <= path.n_switches
        assert path.mismatch_measure(grid) <= path.n_switches * (grid[1] - grid[0]) + 1e-15
        labels = path.left_endpoint(grid)
        differs = np.flatnonzero(labels != path.value_at(grid[:-1] + 1e-12))
        assert set(differs) <= set(cells)
    assert np.mean(occ) == pytest.approx(2 / 3, abs=0.03)
    # expected switch count: 5 * (2 * 1/3 + 1 * 2/3)
    assert np.mean(counts) == pytest.approx(5 * 4 / 3, rel=0.08)


def test_switch_path_validation():
    with pytest.raises(DomainError):
        SwitchPath(0.0, 1.0, [0.5], [0, 0])
    with pytest.raises(DomainError):
        SwitchPath(0.0, 1.0, [1.5], [0, 1])
    p = SwitchPath(0.0, 1.0, [0.25, 0.5], [0, 1, 0])
    assert list(p.value_at([0.1, 0.25, 0.3, 0.9])) == [0, 1, 1, 0]


def test_switching_contrast_reductions():
    grid = InfillGrid(1.0, 3.5, 500)
    t = grid.times
    thetas = [(0.3, 1.2), (0.12, 0.9)]
    frames = [F1, F2]
    x = infill.simulate_switching_path(frames, 0.04, t, np.zeros(500, int), 4)
    flat = SwitchPath(1.0, 3.5, [], [0])
    assert switching_conditional_contrast((t, x), flat, thetas, frames) == pytest.approx(
        contrast_mn((t, x), thetas[0], F1), abs=1e-12)

    path = SwitchPath(1.0, 3.5, [1.6012, 2.2, 2.90005], [0, 1, 0, 1])
    labels = path.left_endpoint(t)
    x = infill.simulate_switching_path(frames, 0.04, t, labels, 5)
    params = [fr.with_values(theta_minus=a, theta_plus=b) for fr, (a, b) in zip(frames, thetas)]
    shift = 0.5 * math.log(2 * math.pi * grid.delta_n)
    cells = set(path.switch_cells(t))
    stable = [i for i in range(grid.n) if i not in cells]
    naive = 0.0
    for group in (stable, sorted(cells)):
        for i in group:
            naive += float(srdcm.regime_bridge_logdensity(
                x[i], x[i + 1], t[i], t[i + 1], params[labels[i]])) + shift
    got = switching_conditional_contrast((t, x), path, thetas, frames)
    assert got == pytest.approx(naive / grid.n, abs=1e-10)


def test_pathwise_limit_maximized_at_truth():
    path = SwitchPath(1.0, 3.5, [1.6, 2.2, 2.9], [0, 1, 0, 1])
    theta0s = [(0.3836, 1.0058), (0.1002, 0.9969)]
    best = pathwise_limit_contrast(theta0s, theta0s, path, [F1, F2])
    rng = np.random.default_rng(1)
    for _ in range(200):
        th = [(a * rng.uniform(0.5, 2), b * rng.uniform(0.5, 2)) for a, b in theta0s]
        assert pathwise_limit_contrast(th, theta0s, path, [F1, F2]) <= best + 1e-15


def test_local_maxima():
    u, v = np.meshgrid(np.linspace(-2, 2, 41), np.linspace(-2, 2, 41))
    assert infill.local_maxima(-(u ** 2 + v ** 2)) == 1
    assert infill.local_maxima(-((u ** 2 - 1) ** 2 + v ** 2)) == 2


def test_count_inversions():
    assert count_inversions([5, 4, 4, 3]) == 0
    assert count_inversions([5, 6, 4, 5]) == 2


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_rdcm_experiment_shape_and_summary(tmp_path):
    res = rdcm_consistency_experiment((0.218, 1.0033), single_deadline(), [250, 500], 5,
                                      seed=3)
    assert len(res.rows) == 2 * 5 * 2
    res.write_csv(tmp_path / "e.csv")
    res.write_summary(tmp_path / "s.json")
    rows = _read_rows(tmp_path / "e.csv")
    summary = json.loads((tmp_path / "s.json").read_text())
    for entry in summary["by_n"]:
        for comp in ("theta_minus", "theta_plus"):
            errs = [float(r["abs_error"]) for r in rows
                    if int(r["n"]) == entry["n"] and r["component"] == comp]
            assert entry[comp]["median_abs_error"] == pytest.approx(np.median(errs), rel=1e-10)
    again = rdcm_consistency_experiment((0.218, 1.0033), single_deadline(), [250, 500], 5,
                                        seed=3)
    again.write_csv(tmp_path / "e2.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    assert summary["minf_local_maxima"] >= 1 and 0 <= summary["mn_multimodal_share"] <= 1
    rep = res.reports[(500, 0)]
    assert rep.sup_gap >= abs(rep.mn_values - rep.minf_values).max() - 1e-15


def test_switching_experiment_shape():
    Q = np.array([[-2.0, 2.0], [1.0, -1.0]])
    res = switching_consistency_experiment([(0.3836, 1.0058), (0.1002, 0.9969)], [F1, F2], Q,
                                           [200, 400], 3, seed=1, t0=1.0, l=3.5)
    assert len(res.rows) == 2 * 3 * 4
    assert res.summary["switch_cells_le_switches"]
    assert res.summary["visible"] == {"theta_plus_1": True, "theta_plus_2": True}
    with pytest.raises(DomainError):
        switching_consistency_experiment([(0.3, 1.0)] * 2, [F1, F2], Q, [50], 1, 0, mode="x")
