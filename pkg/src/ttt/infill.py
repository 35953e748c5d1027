"""Fixed-horizon infill: contrast functions, their limits and Monte Carlo studies.

The observation window ``[t0, l]`` stays fixed while the step
``delta_n = (l - t0) / n`` shrinks. Drift parameters are held fixed, so the
contrasts are functions of the diffusion block ``theta = (theta_minus,
theta_plus)`` only.

Every variance in the model is proportional to ``theta_minus**2``. Writing
``u = theta_minus**-2``, the rescaled log-density of step ``i`` is

    k_i(theta_plus) + 0.5 * log(u) - u * c_i(theta_plus),

so for a fixed ``theta_plus`` the best ``u`` is explicit and fitting reduces to
a one-dimensional search. :func:`contrast_mn` evaluates the same quantity
directly from the bridge moments and serves as the reference.
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np
from scipy.linalg import expm
from scipy.ndimage import maximum_filter
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from . import _rng
from . import rdcm
from .errors import DomainError, RangeError
from .optim import minimize_box
from .rdcm import DEFAULT_BOX, DELTA_GUARD, VAR_FLOOR, RdcmParams

GRID_POINTS = 41
_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)
CSV_COLUMNS = ("n", "rep", "component", "abs_error", "sup_gap")


@dataclass(frozen=True)
class InfillGrid:
    t0: float
    l: float
    n: int

    def __post_init__(self):
        if not self.l > self.t0:
            raise DomainError("need l > t0")
        if int(self.n) < 1:
            raise DomainError("need at least one step")

    @property
    def delta_n(self):
        return (self.l - self.t0) / self.n

    @property
    def times(self):
        return self.t0 + self.delta_n * np.arange(self.n + 1)

    def check(self, deadline_T, delta=DELTA_GUARD):
        if self.l > deadline_T - delta:
            raise RangeError(f"horizon l={self.l} violates l <= T - delta "
                             f"(T={deadline_T}, delta={delta})")


@dataclass(frozen=True, eq=False)
class SwitchPath:
    """Piecewise-constant regime path on ``[t0, l)``, right-continuous."""

    t0: float
    l: float
    switch_times: np.ndarray
    regime_labels: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.switch_times, float)
        j = np.asarray(self.regime_labels, int)
        if j.size != k.size + 1:
            raise DomainError("need one more label than switch times")
        if k.size and (np.any(np.diff(k) <= 0) or k[0] <= self.t0 or k[-1] >= self.l):
            raise DomainError("switch times must increase strictly inside (t0, l)")
        if np.any(j[1:] == j[:-1]):
            raise DomainError("consecutive segments must carry different labels")
        object.__setattr__(self, "switch_times", k)
        object.__setattr__(self, "regime_labels", j)

    @property
    def n_switches(self):
        return self.switch_times.size

    @property
    def edges(self):
        return np.concatenate([[self.t0], self.switch_times, [self.l]])

    def value_at(self, t):
        return self.regime_labels[np.searchsorted(self.switch_times, t, side="right")]

    def left_endpoint(self, grid):
        """Regime of each cell ``[t_{i-1}, t_i)`` read at its left end."""
        return self.value_at(np.asarray(grid, float)[:-1])

    def switch_cells(self, grid):
        """0-based indices of cells whose interior holds a switch time."""
        grid = np.asarray(grid, float)
        cell = np.searchsorted(grid, self.switch_times, side="right") - 1
        inside = grid[cell] < self.switch_times
        return np.unique(cell[inside])

    def mismatch_measure(self, grid):
        """Lebesgue measure of ``{t : s(t) != s(t_{i-1})}`` over the window."""
        grid = np.asarray(grid, float)
        total = 0.0
        edges = self.edges
        for i in self.switch_cells(grid):
            lo, hi = grid[i], grid[i + 1]
            ref = self.value_at(lo)
            cuts = np.concatenate([[lo], edges[(edges > lo) & (edges < hi)], [hi]])
            labels = self.value_at(cuts[:-1])
            total += float(np.sum(np.diff(cuts)[labels != ref]))
        return total


@dataclass
class ContrastReport:
    theta_grid: np.ndarray
    mn_values: np.ndarray
    minf_values: np.ndarray
    argmax_mn: np.ndarray
    argmax_minf: np.ndarray
    sup_gap: float
    theta_hat: np.ndarray = None


# ---------------------------------------------------------------------------
# contrasts
# ---------------------------------------------------------------------------

def _with_theta(frame, theta, drift=None):
    values = {"theta_minus": float(theta[0]), "theta_plus": float(theta[1])}
    if drift is not None:
        values.update(a=drift[0], b_minus=drift[1], b_plus=drift[2])
    return frame.with_values(**values)


def contrast_mn(series, theta, frame, drift=None):
    """Normalized bridge contrast ``M_n`` at ``theta = (theta_minus, theta_plus)``.

    ``frame`` supplies the drift ``(a, b_minus, b_plus)``, ``tau`` and the
    deadline; ``drift`` overrides the drift triple. The grid step is read from
    the series, which must be regular.
    """
    t, x = rdcm._times_values(series)
    params = _with_theta(frame, theta, drift)
    rdcm._check_guard(t, params, DELTA_GUARD)
    n = t.size - 1
    delta_n = (t[-1] - t[0]) / n
    m, v = rdcm.uncond_moments(x[:-1], t[:-1], t[1:], params)
    R_n = rdcm.terminal_log_ratio(x[0], t[0], x[-1], t[-1], params)
    return float(R_n / n - np.sum(np.log(v / delta_n)) / (2 * n)
                 - np.sum((x[1:] - m) ** 2 / v) / (2 * n))


def _scaled_step_terms(t, x, frame, theta_plus, drift=None):
    """Per-step ``(k_i, c_i)`` at ``theta_minus = 1`` (see module docstring)."""
    reg = _with_theta(frame, (1.0, theta_plus), drift)
    n = t.size - 1
    delta_n = (t[-1] - t[0]) / n
    m, v = rdcm.uncond_moments(x[:-1], t[:-1], t[1:], reg)
    # both parts of the terminal increment scale exactly like the step terms
    log_part, quad_part = rdcm._terminal_increment(m, v, x[1:], t[1:], reg)
    k = log_part - 0.5 * np.log(v / delta_n)
    c = quad_part + (x[1:] - m) ** 2 / (2.0 * v)
    return k, c


def _best_u(alpha, C, u_lo, u_hi):
    if alpha <= 0:
        return u_lo
    u = alpha / C if C > 0 else u_hi
    return min(max(u, u_lo), u_hi)


def _profile(k_sum, alpha, C, box):
    lo, hi = box["theta_minus"]
    u = _best_u(alpha, C, 1.0 / hi ** 2, 1.0 / lo ** 2)
    return k_sum + alpha * math.log(u) - u * C, 1.0 / math.sqrt(u)


def _fit_profile(terms_at, box, grid_points=GRID_POINTS):
    """Maximize ``k(tp) + alpha log u - u C(tp)`` over ``(theta_minus, tp)``.

    ``terms_at(tp)`` returns ``(k_sum, alpha, C)``. Grid scan over the
    ``theta_plus`` box, then bounded Brent around the best grid node.
    """
    lo, hi = box["theta_plus"]
    grid = np.linspace(lo, hi, grid_points)
    vals = []
    for tp in grid:
        vals.append(_profile(*terms_at(tp), box)[0])
    vals = np.array(vals)
    i = int(np.argmax(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(lambda tp: -_profile(*terms_at(tp), box)[0], bounds=(a, b),
                          method="bounded", options={"xatol": 1e-7})
    if -res.fun >= vals[i]:
        tp, val = float(res.x), -float(res.fun)
    else:
        tp, val = float(grid[i]), float(vals[i])
    tm = _profile(*terms_at(tp), box)[1]
    return np.array([tm, tp]), val, grid, vals


def _segment_integral(func, w_lo, w_hi, max_width=0.5):
    """Integral of ``func(w)`` over ``[w_lo, w_hi]`` (``w_lo > 0``) in ``s = log w``.

    Power laws in ``w`` are exponentials in ``s``, so 32-point Gauss-Legendre
    panels of log-width at most ``max_width`` integrate them to rounding error.
    """
    if w_hi <= w_lo:
        return 0.0
    s_lo, s_hi = math.log(w_lo), math.log(w_hi)
    n_pan = max(1, math.ceil((s_hi - s_lo) / max_width))
    edges = np.linspace(s_lo, s_hi, n_pan + 1)
    half = 0.5 * np.diff(edges)
    s = (edges[:-1] + half)[:, None] + half[:, None] * _GL_X[None, :]
    w = np.exp(s)
    return float(np.sum(half * ((func(w) * w) @ _GL_W)))


def _psi_integrals(theta_plus, theta0, t0, l, frame):
    """``int log h^2`` and ``int h0^2 / h^2`` over ``[t0, l]`` with ``theta_minus = 1``.

    ``h`` is the volatility profile at ``theta_plus`` and ``h0`` the true one
    (``theta0[0]`` included). The integrand is constant before ``tau``; the
    decaying part is integrated in the time to deadline.
    """
    T, tau = frame.deadline_T, frame.tau
    pre = max(min(l, tau) - t0, 0.0)
    I_log = 0.0
    I_ratio = pre * theta0[0] ** 2
    if l > tau:
        w_lo, w_hi = T - l, T - max(t0, tau)

        def h2(w, tp, tm=1.0):
            return rdcm.g_vol(w, tm, tp, tau, T) ** 2

        I_log = _segment_integral(lambda w: np.log(h2(w, theta_plus)), w_lo, w_hi)
        I_ratio += _segment_integral(
            lambda w: h2(w, theta0[1], theta0[0]) / h2(w, theta_plus), w_lo, w_hi)
    return I_log, I_ratio


def limit_contrast(theta, theta0, t0, l, frame):
    """Limit contrast ``-(1/(2(l - t0))) int [log g^2 + g0^2/g^2] du``.

    Parameters
    ----------
    theta, theta0 : (float, float)
        Candidate and true ``(theta_minus, theta_plus)``.
    t0, l : float
        Observation window, ``l <= T - delta``.
    frame : RdcmParams
        Supplies ``tau`` and the deadline.
    """
    if l > frame.deadline_T - DELTA_GUARD:
        raise RangeError("limit contrast needs l <= T - delta")
    if not theta[0] > 0:
        raise DomainError("theta_minus must be positive (ellipticity)")
    I_log, I_ratio = _psi_integrals(theta[1], theta0, t0, l, frame)
    L = l - t0
    return -(L * math.log(theta[0] ** 2) + I_log + I_ratio / theta[0] ** 2) / (2.0 * L)


def default_grid_box(theta0, box, factor=2.0):
    """Compact neighbourhood ``[theta0 / factor, theta0 * factor]`` clipped to ``box``."""
    out = {}
    for name, v in zip(("theta_minus", "theta_plus"), theta0):
        lo, hi = box[name]
        out[name] = (max(lo, v / factor), min(hi, v * factor))
    return out


def _grid_axes(grid_box, visible_plus, theta0, grid_points=GRID_POINTS):
    tm = np.linspace(*grid_box["theta_minus"], grid_points)
    if visible_plus:
        tp = np.linspace(*grid_box["theta_plus"], grid_points)
    else:
        tp = np.array([float(theta0[1])])
    return tm, tp


def _contrast_grids(k_of_tp, c_of_tp, alpha, theta0, t0, l, frame, tm, tp):
    """``M_n`` and ``M_inf`` on the ``theta_minus x theta_plus`` grid."""
    u = 1.0 / tm ** 2
    mn = np.empty((tm.size, tp.size))
    minf = np.empty_like(mn)
    L = l - t0
    for j, p in enumerate(tp):
        mn[:, j] = k_of_tp[j] + alpha * np.log(u) - u * c_of_tp[j]
        I_log, I_ratio = _psi_integrals(p, theta0, t0, l, frame)
        minf[:, j] = -(L * np.log(tm ** 2) + I_log + I_ratio * u) / (2.0 * L)
    return mn, minf


# ---------------------------------------------------------------------------
# single-regime experiment
# ---------------------------------------------------------------------------

def _rdcm_replicate(truth, theta0, grid, seq, box, drift, tm, tp):
    t = grid.times
    x0 = truth.b_minus
    x = rdcm.simulate_path(truth, x0, t, seq)
    n = grid.n

    def terms_at(theta_plus):
        k, c = _scaled_step_terms(t, x, truth, theta_plus, drift)
        return k.sum() / n, 0.5, c.sum() / n

    theta_hat, _, _, _ = _fit_profile(terms_at, box)
    ks, cs = zip(*(terms_at(p)[::2] for p in tp))
    mn, minf = _contrast_grids(ks, cs, 0.5, theta0, grid.t0, grid.l, truth, tm, tp)
    gap = np.abs(mn - minf)
    i_n = np.unravel_index(np.argmax(mn), mn.shape)
    i_inf = np.unravel_index(np.argmax(minf), minf.shape)
    return ContrastReport(theta_grid=(tm, tp), mn_values=mn, minf_values=minf,
                          argmax_mn=np.array([tm[i_n[0]], tp[i_n[1]]]),
                          argmax_minf=np.array([tm[i_inf[0]], tp[i_inf[1]]]),
                          sup_gap=float(gap.max()), theta_hat=theta_hat)


@dataclass
class ExperimentResult:
    rows: list
    estimates: dict
    summary: dict
    config: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(f"{r['n']},{r['rep']},{r['component']},"
                         f"{r['abs_error']:.12g},{r['sup_gap']:.12g}\n")

    def write_summary(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def local_maxima(values):
    """Number of grid points not exceeded by any of their eight neighbours."""
    v = np.asarray(values, float)
    return int(np.sum(v == maximum_filter(v, size=3, mode="nearest")))


def count_inversions(values):
    """Number of consecutive increases in a sequence meant to be non-increasing."""
    v = np.asarray(values, float)
    return int(np.sum(v[1:] > v[:-1]))


def _iqr(values):
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan")
    q75, q25 = np.percentile(v, [75, 25])
    return float(q75 - q25)


def summarize(rows, estimates, n_list, components):
    """Per-``n`` medians of errors and sup-gaps, spreads of estimates, trend checks.

    Replications without an estimate (failed fit, or a regime the simulated
    chain never visited) are left out of the medians and counted in
    ``not_estimated``.
    """
    by_n = []
    for n in n_list:
        entry = {"n": int(n)}
        for comp in components:
            errs = [r["abs_error"] for r in rows if r["n"] == n and r["component"] == comp]
            gaps = [r["sup_gap"] for r in rows if r["n"] == n and r["component"] == comp]
            ests = [e[comp] for (nn, _), e in sorted(estimates.items()) if nn == n]
            finite = [e for e in errs if np.isfinite(e)]
            gaps = [g for g in gaps if np.isfinite(g)]
            entry[comp] = {
                "median_abs_error": float(np.median(finite)) if finite else float("nan"),
                "median_sup_gap": float(np.median(gaps)) if gaps else float("nan"),
                "spread_iqr": _iqr(ests),
                "not_estimated": len(errs) - len(finite),
            }
        by_n.append(entry)
    trends = {}
    for comp in components:
        med = [e[comp]["median_abs_error"] for e in by_n]
        gap = [e[comp]["median_sup_gap"] for e in by_n]
        spread = [e[comp]["spread_iqr"] for e in by_n]
        trends[comp] = {"error_inversions": count_inversions(med),
                        "sup_gap_inversions": count_inversions(gap),
                        "spread_ratio_last_first": spread[-1] / spread[0] if spread[0] else None}
    return {"by_n": by_n, "trends": trends}


def rdcm_consistency_experiment(theta0, frame, n_list, n_reps, seed, t0=0.0, l=None,
                                box=None, drift=None, grid_box=None):
    """Simulate, fit ``M_n`` and compare with ``M_inf`` for each ``n`` in ``n_list``.

    Parameters
    ----------
    theta0 : (float, float)
        True ``(theta_minus, theta_plus)``; ``frame`` provides the true drift,
        ``tau`` and the deadline.
    n_list : sequence of int
        Step counts over the fixed window ``[t0, l]`` (``l`` defaults to
        ``T - 0.25``).
    n_reps, seed : int
        Replications per ``n``; cell ``(n_index, rep)`` draws from child
        ``n_index * n_reps + rep`` of ``task_seeds(seed, ...)``.
    box : dict, optional
        Search box for ``theta_minus`` / ``theta_plus``.
    drift : (a, b_minus, b_plus), optional
        Drift used for fitting; defaults to the true drift.
    grid_box : dict, optional
        Range of the 41-point sup-gap grid per visible coordinate; defaults
        to :func:`default_grid_box`.

    ``theta_plus`` is part of the visible block only when ``l > tau``; it is
    estimated and reported either way.
    """
    truth = frame.with_values(theta_minus=theta0[0], theta_plus=theta0[1])
    l = truth.deadline_T - 0.25 if l is None else l
    box = {**DEFAULT_BOX, **(box or {})}
    visible_plus = l > truth.tau
    components = ("theta_minus", "theta_plus")
    tm, tp = _grid_axes(grid_box or default_grid_box(theta0, box), visible_plus, theta0)
    seeds = _rng.task_seeds(seed, len(n_list) * n_reps)
    rows, estimates, reports = [], {}, {}
    for a, n in enumerate(n_list):
        grid = InfillGrid(t0, l, int(n))
        grid.check(truth.deadline_T)
        for rep in range(n_reps):
            try:
                rep_out = _rdcm_replicate(truth, theta0, grid, seeds[a * n_reps + rep], box,
                                          drift, tm, tp)
                est, gap = rep_out.theta_hat, rep_out.sup_gap
            except (ArithmeticError, ValueError):
                rep_out, est, gap = None, np.full(2, np.nan), float("nan")
            estimates[(int(n), rep)] = dict(zip(components, map(float, est)))
            reports[(int(n), rep)] = rep_out
            for comp, e, t_ in zip(components, est, theta0):
                rows.append({"n": int(n), "rep": rep, "component": comp,
                             "abs_error": float(abs(e - t_)), "sup_gap": gap})
    summary = summarize(rows, estimates, [int(n) for n in n_list], components)
    # multimodal grids are reported, not resolved
    done = [r for r in reports.values() if r is not None]
    summary["minf_local_maxima"] = local_maxima(done[0].minf_values) if done else None
    summary["mn_multimodal_share"] = (float(np.mean([local_maxima(r.mn_values) > 1
                                                     for r in done])) if done else None)
    summary.update({"t0": t0, "l": l, "tau": truth.tau, "deadline_T": truth.deadline_T,
                    "theta0": list(map(float, theta0)), "visible": {
                        "theta_minus": True, "theta_plus": bool(visible_plus)},
                    "n_reps": n_reps, "seed": seed, "mode": "rdcm"})
    res = ExperimentResult(rows, estimates, summary)
    res.reports = reports
    return res


def flatness_in_theta_plus(series, theta_minus, theta_plus_grid, frame, drift=None):
    """Range over ``theta_plus`` of ``M_n`` with and without its endpoint term.

    Returns ``(data_part_range, full_range)``; on a window before ``tau`` the
    first is zero up to rounding.
    """
    t, x = rdcm._times_values(series)
    n = t.size - 1
    full, data = [], []
    for tp in theta_plus_grid:
        val = contrast_mn((t, x), (theta_minus, tp), frame, drift)
        params = _with_theta(frame, (theta_minus, tp), drift)
        R_n = rdcm.terminal_log_ratio(x[0], t[0], x[-1], t[-1], params)
        full.append(val)
        data.append(val - R_n / n)
    return float(np.ptp(data)), float(np.ptp(full))


# ---------------------------------------------------------------------------
# regime paths
# ---------------------------------------------------------------------------

def check_generator(Q):
    Q = np.asarray(Q, float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DomainError("generator must be square")
    off = Q[~np.eye(Q.shape[0], dtype=bool)]
    if np.any(off <= 0):
        raise DomainError("generator off-diagonal rates must be strictly positive")
    if not np.allclose(Q.sum(axis=1), 0.0, atol=1e-12 * np.abs(Q).max()):
        raise DomainError("generator rows must sum to zero")
    return Q


def transition_matrix(Q, dt):
    """``exp(Q dt)``: closed form for two states, scipy's Pade expm otherwise."""
    Q = check_generator(Q)
    if Q.shape == (2, 2):
        q1, q2 = Q[0, 1], Q[1, 0]
        lam = q1 + q2
        e = -np.expm1(-lam * dt)  # 1 - exp(-lam dt), accurate for small steps
        return np.array([[1.0 - q1 * e / lam, q1 * e / lam],
                         [q2 * e / lam, 1.0 - q2 * e / lam]])
    return expm(Q * dt)


def stationary_distribution(Q):
    Q = check_generator(Q)
    m = Q.shape[0]
    A = np.vstack([Q.T, np.ones(m)])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(A, b, rcond=None)[0]


def simulate_ctmc(Q, t0, l, rng, initial=None):
    """Exact CTMC path on ``[t0, l)``: exponential holding times, embedded jumps.

    ``initial`` is a state or a distribution (default: stationary).
    """
    Q = check_generator(Q)
    m = Q.shape[0]
    if initial is None:
        initial = stationary_distribution(Q)
    if np.ndim(initial) == 0:
        state = int(initial)
    else:
        state = int(rng.choice(m, p=np.asarray(initial, float)))
    rates = -np.diag(Q)
    times, labels = [], [state]
    t = t0
    while True:
        t += rng.exponential(1.0 / rates[state])
        if t >= l:
            break
        jump = Q[state].copy()
        jump[state] = 0.0
        state = int(rng.choice(m, p=jump / rates[state]))
        times.append(t)
        labels.append(state)
    return SwitchPath(t0, l, np.array(times), np.array(labels))


def simulate_switching_path(regimes, x0, grid, labels, seed):
    """Step ``X`` on ``grid`` with regime ``labels[i]`` governing cell ``i``."""
    grid = np.asarray(grid, float)
    noise, _ = _rng.streams(seed)
    z = noise.standard_normal(grid.size - 1)
    coeffs = [rdcm.step_coefficients(reg, grid) for reg in regimes]
    alpha = np.choose(labels, [c[0] for c in coeffs])
    beta = np.choose(labels, [c[1] for c in coeffs])
    sigma = np.choose(labels, [c[2] for c in coeffs])
    return rdcm.propagate(float(x0), alpha, beta, sigma, z)


# ---------------------------------------------------------------------------
# switching contrasts
# ---------------------------------------------------------------------------

def switching_step_logdensities(series, thetas, frames, drifts=None):
    """``(n, m)`` rescaled log-densities ``log f~`` for every regime at ``thetas``."""
    t, x = rdcm._times_values(series)
    drifts = drifts or [None] * len(frames)
    out = np.empty((t.size - 1, len(frames)))
    for j, (fr, th, dr) in enumerate(zip(frames, thetas, drifts)):
        k, c = _scaled_step_terms(t, x, fr, th[1], dr)
        out[:, j] = k + 0.5 * math.log(th[0] ** -2) - th[0] ** -2 * c
    return out


def switching_conditional_contrast(series, switch_path, thetas, frames, drifts=None):
    """``M_n(theta | s)``: mean rescaled log-density under the left-endpoint regimes."""
    t, _ = rdcm._times_values(series)
    labels = switch_path.left_endpoint(t)
    logf = switching_step_logdensities(series, thetas, frames, drifts)
    return float(np.mean(logf[np.arange(labels.size), labels]))


def pathwise_limit_contrast(thetas, theta0s, switch_path, frames):
    """``M_inf(theta | s)``: per-segment integrals of the regime-wise ``Psi``."""
    t0, l = switch_path.t0, switch_path.l
    edges = switch_path.edges
    total = 0.0
    for r, j in enumerate(switch_path.regime_labels):
        a, b = edges[r], edges[r + 1]
        I_log, I_ratio = _psi_integrals(thetas[j][1], theta0s[j], a, b, frames[j])
        total += (b - a) * math.log(thetas[j][0] ** 2) + I_log + I_ratio / thetas[j][0] ** 2
    return -total / (2.0 * (l - t0))


def observed_contrast(series, thetas, frames, sampled_labels, drifts=None):
    """Monte Carlo observed contrast ``(1/n) log mean_k exp(n M_n(theta | s_k))``.

    ``sampled_labels`` is a ``(K, n)`` array of left-endpoint regime paths
    drawn from the chain's law.
    """
    logf = switching_step_logdensities(series, thetas, frames, drifts)
    n = logf.shape[0]
    labels = np.asarray(sampled_labels, int)
    per_path = logf[np.arange(n)[None, :], labels].sum(axis=1)
    return float((logsumexp(per_path) - math.log(labels.shape[0])) / n)


def _segment_weights(switch_path, j):
    """Sub-windows ``[a, b]`` where the path sits in regime ``j``."""
    edges = switch_path.edges
    return [(edges[r], edges[r + 1]) for r, lab in enumerate(switch_path.regime_labels)
            if lab == j]


def _switching_replicate(truths, theta0s, grid, seq, box, grid_boxes, drifts, Q, mode,
                         n_paths):
    noise_seq, regime_seq, path_seq = _rng._as_seq(seq).spawn(3)
    t = grid.times
    regime_rng = np.random.default_rng(regime_seq)
    spath = simulate_ctmc(Q, grid.t0, grid.l, regime_rng)
    labels = spath.left_endpoint(t)
    x0 = truths[labels[0]].b_minus
    x = simulate_switching_path(truths, x0, t, labels, noise_seq)
    n = grid.n
    m = len(truths)
    drifts = drifts or [None] * m

    def cache(j):
        memo = {}

        def at(tp):
            if tp not in memo:
                memo[tp] = _scaled_step_terms(t, x, truths[j], tp, drifts[j])
            return memo[tp]
        return at

    terms = [cache(j) for j in range(m)]
    theta_hat = np.full((m, 2), np.nan)
    gaps = np.full(m, np.nan)
    d_max, d_min = np.zeros(m), np.zeros(m)
    for j in range(m):
        sel = labels == j
        if not sel.any():
            continue

        def terms_at(tp, j=j, sel=sel):
            k, c = terms[j](tp)
            return k[sel].sum() / n, sel.sum() / (2.0 * n), c[sel].sum() / n

        if mode == "conditional":
            theta_hat[j], _, _, _ = _fit_profile(terms_at, box)
        visible_plus = grid.l > truths[j].tau
        tm, tp = _grid_axes(grid_boxes[j], visible_plus, theta0s[j])
        ks, alphas, cs = zip(*(terms_at(p) for p in tp))
        mn = np.empty((tm.size, tp.size))
        minf = np.zeros_like(mn)
        u = 1.0 / tm ** 2
        L = grid.l - grid.t0
        for q, p in enumerate(tp):
            mn[:, q] = ks[q] + alphas[q] * np.log(u) - u * cs[q]
            for a, b in _segment_weights(spath, j):
                I_log, I_ratio = _psi_integrals(p, theta0s[j], a, b, truths[j])
                minf[:, q] -= ((b - a) * np.log(tm ** 2) + I_log + I_ratio * u) / (2.0 * L)
        diff = mn - minf
        gaps[j] = float(np.abs(diff).max())
        d_max[j], d_min[j] = diff.max(), diff.min()

    if mode == "marginal":
        path_rng = np.random.default_rng(path_seq)
        sampled = np.array([simulate_ctmc(Q, grid.t0, grid.l, path_rng).left_endpoint(t)
                            for _ in range(n_paths)])
        names = [(j, c) for j in range(m) for c in ("theta_minus", "theta_plus")]
        lo, hi = rdcm.internal_bounds([c for _, c in names], box)

        def neg(z):
            th = np.exp(z).reshape(m, 2)
            try:
                return -observed_contrast((t, x), th, truths, sampled, drifts)
            except (ArithmeticError, ValueError):
                return np.inf

        x_start = np.log(np.array([[tr.theta_minus, tr.theta_plus] for tr in truths]).ravel())
        res = minimize_box(neg, lo, hi, x0=np.clip(x_start, lo, hi), n_starts=2,
                           seed=int(regime_seq.generate_state(1)[0]), maxiter=600, rtol=1e-9)
        theta_hat = np.exp(res.x).reshape(m, 2)
    # the sum of per-regime gaps over the product grid attains its sup at a corner
    total_gap = float(max(d_max.sum(), -d_min.sum()))
    return theta_hat, gaps, total_gap, spath


def switching_consistency_experiment(theta0s, frames, Q, n_list, n_reps, seed, t0=0.0,
                                     l=None, box=None, drifts=None, mode="conditional",
                                     n_paths=256, grid_boxes=None):
    """Regime-wise infill study under an exogenous two-state (or larger) chain.

    Parameters
    ----------
    theta0s : sequence of (float, float)
        True ``(theta_minus, theta_plus)`` per regime; ``frames`` carry the true
        drifts, ``tau_j`` and ``T_j``.
    Q : array_like
        Generator with strictly positive off-diagonal rates.
    mode : {"conditional", "marginal"}
        ``conditional`` maximizes ``M_n(theta | s)`` along the true path;
        ``marginal`` maximizes the Monte Carlo observed contrast over
        ``n_paths`` chain trajectories drawn from the prior.

    Rows carry the per-regime sup-gap of the path-wise contrast; the summary
    adds the joint sup-gap, switch counts and the switch-cell check.
    """
    if mode not in ("conditional", "marginal"):
        raise DomainError("mode must be 'conditional' or 'marginal'")
    Q = check_generator(Q)
    m = len(frames)
    truths = [fr.with_values(theta_minus=th[0], theta_plus=th[1])
              for fr, th in zip(frames, theta0s)]
    T_min = min(tr.deadline_T for tr in truths)
    l = T_min - 0.25 if l is None else l
    box = {**DEFAULT_BOX, **(box or {})}
    grid_boxes = grid_boxes or [default_grid_box(th, box) for th in theta0s]
    components = [f"{c}_{j + 1}" for j in range(m) for c in ("theta_minus", "theta_plus")]
    seeds = _rng.task_seeds(seed, len(n_list) * n_reps)
    rows, estimates, extra = [], {}, []
    for a, n in enumerate(n_list):
        grid = InfillGrid(t0, l, int(n))
        grid.check(T_min)
        for rep in range(n_reps):
            try:
                th, gaps, total_gap, spath = _switching_replicate(
                    truths, theta0s, grid, seeds[a * n_reps + rep], box, grid_boxes, drifts,
                    Q, mode, n_paths)
                cells = spath.switch_cells(grid.times).size
                extra.append({"n": int(n), "rep": rep, "n_switches": spath.n_switches,
                              "switch_cells": int(cells), "joint_sup_gap": total_gap,
                              "mismatch": spath.mismatch_measure(grid.times)})
            except (ArithmeticError, ValueError):
                th, gaps = np.full((m, 2), np.nan), np.full(m, np.nan)
            estimates[(int(n), rep)] = {comp: float(th[j, c]) for j in range(m)
                                        for c, comp in enumerate(components[2 * j:2 * j + 2])}
            for j in range(m):
                for c in range(2):
                    comp = components[2 * j + c]
                    rows.append({"n": int(n), "rep": rep, "component": comp,
                                 "abs_error": float(abs(th[j, c] - theta0s[j][c])),
                                 "sup_gap": float(gaps[j])})
    summary = summarize(rows, estimates, [int(n) for n in n_list], components)
    summary.update({
        "t0": t0, "l": l, "mode": mode, "n_reps": n_reps, "seed": seed,
        "n_paths": n_paths if mode == "marginal" else None,
        "taus": [tr.tau for tr in truths], "deadlines": [tr.deadline_T for tr in truths],
        "visible": {f"theta_plus_{j + 1}": bool(l > truths[j].tau) for j in range(m)},
        "switch_cells_le_switches": all(e["switch_cells"] <= e["n_switches"] for e in extra),
        "paths": extra})
    return ExperimentResult(rows, estimates, summary)
