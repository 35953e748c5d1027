"""Single-regime deadline-constrained bridge model.

The observable follows the linear SDE

    dX_t = a [phi(T - t) - X_t] dt + g(T - t) dW_t,    X_T = 0,

with coefficients that are constant up to the structural time ``tau`` and
decay as a power of the time to deadline afterwards. Conditional on the last
observation and on the terminal pin the one-step law is Gaussian; this module
computes its moments, samples it, and evaluates and maximizes the exact bridge
likelihood.

Times are year fractions from the series epoch. All moment routines broadcast
over numpy arrays.
"""

from dataclasses import dataclass, field, replace
import math
import warnings

import numpy as np
from scipy.special import gammainc, gammaln

from . import _rng
from .errors import (DegenerateBridgeError, DomainError, FitError,
                     OrderingError, RangeError)
from .optim import minimize_box

DELTA_GUARD = 1.0 / 3650.0
VAR_FLOOR = 1e-18
PARAM_NAMES = ("a", "b_minus", "b_plus", "theta_minus", "theta_plus")
DEFAULT_BOX = {
    "a": (0.01, 100.0),
    "b_minus": (-1.0, 1.0),
    "b_plus": (0.05, 5.0),
    "theta_minus": (1e-4, 2.0),
    "theta_plus": (0.05, 5.0),
}
# parameters optimized on a log scale; b_minus may change sign
LOG_SCALED = ("a", "b_plus", "theta_minus", "theta_plus")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(32)


class WeakIdentificationWarning(UserWarning):
    """Post-tau shape parameters are free although no observation lies after tau."""


@dataclass(frozen=True)
class RdcmParams:
    a: float
    b_minus: float
    b_plus: float
    theta_minus: float
    theta_plus: float
    tau: float
    deadline_T: float

    def __post_init__(self):
        if not 0.0 <= self.tau < self.deadline_T:
            raise DomainError(
                f"need 0 <= tau < deadline_T, got tau={self.tau}, "
                f"deadline_T={self.deadline_T}")
        for name in LOG_SCALED:
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be strictly positive")

    def vector(self, names=PARAM_NAMES):
        return np.array([getattr(self, n) for n in names], dtype=float)

    def with_values(self, **values):
        return replace(self, **{k: float(v) for k, v in values.items()})


@dataclass(frozen=True)
class BridgeLaw:
    mean_k: np.ndarray
    variance_sigma2: np.ndarray
    ratio_R: np.ndarray
    uncond_mean_m: np.ndarray
    uncond_var_v: np.ndarray


@dataclass
class RdcmFit:
    params: RdcmParams
    loglik: float
    aic: float
    fixed_mask: dict
    optimizer_report: dict
    on_boundary: list = field(default_factory=list)

    @property
    def converged(self):
        return bool(self.optimizer_report.get("converged", False))


# ---------------------------------------------------------------------------
# coefficient functions
# ---------------------------------------------------------------------------

def _decay_profile(time_to_deadline, exponent, tau, deadline_T):
    ratio = np.maximum(np.asarray(time_to_deadline, float) / (deadline_T - tau), 0.0)
    return np.minimum(1.0, ratio ** exponent)


def phi(time_to_deadline, b_minus, b_plus, tau, deadline_T):
    """Target level as a function of the time to deadline ``T - t``."""
    return b_minus * _decay_profile(time_to_deadline, b_plus, tau, deadline_T)


def g_vol(time_to_deadline, theta_minus, theta_plus, tau, deadline_T):
    """Diffusion coefficient as a function of the time to deadline ``T - t``."""
    return theta_minus * _decay_profile(time_to_deadline, theta_plus, tau, deadline_T)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

def _decay_integral(c, p, w_lo, width, span):
    """Integral of ``exp(-c y) * ((w_lo + y) / span)**p`` over ``y`` in ``[0, width]``.

    ``w_lo == 0`` (segment reaching the deadline) uses the regularized lower
    incomplete gamma function. Otherwise composite Gauss-Legendre with panels
    graded away from the singularity at ``y = -w_lo``, each panel spanning at
    most 20 e-folds of the exponential; the tail beyond ``(100 + 4p)/c`` is
    below double precision and is dropped.
    """
    c, p, w_lo, width = (np.array(v, dtype=float) for v in
                         np.broadcast_arrays(c, p, w_lo, width))
    out = np.zeros(c.shape)
    width = np.maximum(width, 0.0)

    closed = (w_lo <= 0.0) & (width > 0.0)
    if closed.any():
        cc, pp, ww = c[closed], p[closed], width[closed]
        if np.ptp(cc) == 0 and np.ptp(pp) == 0:
            # shared (c, p): segments from before tau all have the same width
            cc, pp = cc[:1], pp[:1]
            ww, inverse = np.unique(ww, return_inverse=True)
        else:
            inverse = slice(None)
        log_scale = -pp * np.log(span) - (pp + 1.0) * np.log(cc) + gammaln(pp + 1.0)
        out[closed] = (np.exp(log_scale) * gammainc(pp + 1.0, cc * ww))[inverse]

    quad = (w_lo > 0.0) & (width > 0.0)
    if quad.any():
        cq, pq, wq = c[quad], p[quad], w_lo[quad]
        y_end = np.minimum(width[quad], (100.0 + 4.0 * pq) / cq)
        y = np.zeros_like(y_end)
        total = np.zeros_like(y_end)
        active = np.ones(y_end.shape, dtype=bool)
        while active.any():
            ya = y[active]
            remaining = y_end[active] - ya
            h = np.minimum(np.minimum(2.0 * (wq[active] + ya), 20.0 / cq[active]), remaining)
            last = h >= remaining
            nodes = ya[:, None] + 0.5 * h[:, None] * (_GL_X + 1.0)
            log_f = (-cq[active][:, None] * nodes
                     + pq[active][:, None] * np.log((wq[active][:, None] + nodes) / span))
            total[active] += 0.5 * h * (np.exp(log_f) @ _GL_W)
            y[active] = np.where(last, y_end[active], ya + h)
            idx = np.flatnonzero(active)
            active[idx[last]] = False
        out[quad] = total
    return out


def _integrals(t0, t, params):
    """Drift and variance integrals of the moment formulas over ``[t0, t]``.

    Returns ``(a * int e^{-a(t-s)} phi ds, int e^{-2a(t-s)} g^2 ds)``. The
    constant-coefficient piece before ``tau`` is in closed form; the decaying
    piece after ``tau`` goes through :func:`_decay_integral`.
    """
    a, T, tau = params.a, params.deadline_T, params.tau
    t0, t = np.broadcast_arrays(np.asarray(t0, float), np.asarray(t, float))
    if np.any(t < t0):
        raise OrderingError("moment interval has t < t0")
    if np.any(t > T * (1 + 1e-14)):
        raise RangeError("moment interval extends beyond the deadline")
    t = np.minimum(t, T)

    u1 = np.minimum(t, tau)
    pre_len = np.maximum(u1 - t0, 0.0)
    lag = np.maximum(t - u1, 0.0)
    drift = params.b_minus * np.exp(-a * lag) * -np.expm1(-a * pre_len)
    var = (params.theta_minus ** 2 * np.exp(-2.0 * a * lag)
           * -np.expm1(-2.0 * a * pre_len) / (2.0 * a))

    u0 = np.maximum(t0, tau)
    post_len = np.maximum(t - u0, 0.0)
    if np.any(post_len > 0):
        span = T - tau
        w_lo = T - t
        drift = drift + a * params.b_minus * _decay_integral(
            a, params.b_plus, w_lo, post_len, span)
        var = var + params.theta_minus ** 2 * _decay_integral(
            2.0 * a, 2.0 * params.theta_plus, w_lo, post_len, span)
    return drift, var


def uncond_moments(x0, t0, t, params):
    """Mean and variance of ``X_t`` given ``X_{t0} = x0`` without the terminal pin."""
    drift, var = _integrals(t0, t, params)
    t0, t = np.broadcast_arrays(np.asarray(t0, float), np.asarray(t, float))
    mean = np.exp(-params.a * (t - t0)) * np.asarray(x0, float) + drift
    return mean, var


def terminal_moments(x, t, params):
    """Mean and variance of ``X_T`` given ``X_t = x``."""
    return uncond_moments(x, t, params.deadline_T, params)


def terminal_logdensity(x, t, params):
    """``log f_{T|t}(0)``: the unconstrained density of ``X_T`` at zero given ``X_t = x``."""
    mean, var = terminal_moments(x, t, params)
    if np.any(var < VAR_FLOOR):
        raise DegenerateBridgeError("terminal variance under the ellipticity floor")
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * mean ** 2 / var


def _terminal_increment(m_step, v_step, x, t, params):
    """Log and quadratic parts of ``log f_{T|t}(0) - log f_{T|t_prev}(0)``.

    ``m_step, v_step`` are the moments of ``X_t`` given ``X_{t_prev}``. Near the
    deadline the two terminal log-densities are huge and nearly equal, so the
    difference is formed from the exact Markov gaps
    ``m_{T|t_prev} - m_{T|t} = e^{-a(T-t)} (m_step - x)`` and
    ``v_{T|t_prev} - v_{T|t} = e^{-2a(T-t)} v_step`` instead of subtracting.
    Returns ``(log_part, quad_part)``; the increment is their difference.
    """
    mT, vT = terminal_moments(x, t, params)
    if np.any(vT < VAR_FLOOR):
        raise DegenerateBridgeError("terminal variance under the ellipticity floor")
    decay = np.exp(-params.a * (params.deadline_T - np.asarray(t, float)))
    gap_m = decay * (m_step - x)
    gap_v = decay ** 2 * v_step
    log_part = 0.5 * np.log1p(gap_v / vT)
    quad_part = 0.5 * (mT ** 2 * gap_v - (2.0 * mT + gap_m) * gap_m * vT) / (vT * (vT + gap_v))
    return log_part, quad_part


def terminal_log_ratio(x_prev, t_prev, x, t, params):
    """``log f_{T|t}(0) - log f_{T|t_prev}(0)``, evaluated without cancellation."""
    m, v = uncond_moments(x_prev, t_prev, t, params)
    log_part, quad_part = _terminal_increment(m, v, np.asarray(x, float), t, params)
    return log_part - quad_part


def _check_guard(t, params, delta_guard, allow_deadline=False):
    t = np.asarray(t, float)
    bad = t > params.deadline_T - delta_guard
    if allow_deadline:
        bad &= t != params.deadline_T
    if np.any(bad):
        raise RangeError(
            f"observation time within {delta_guard:.3g} years of the deadline "
            f"{params.deadline_T:.6g}")


def bridge_law(x0, t0, t, params, delta_guard=DELTA_GUARD, check_tol=1e-9):
    """Gaussian law of ``X_t`` given ``X_{t0} = x0`` and ``X_T = 0``.

    The variance is returned in the factorized form ``v * R``. The direct
    formula ``v - e^{-2a(T-t)} v^2 / v_{T|t0}`` is evaluated alongside and must
    agree within ``check_tol`` relative to ``v`` (the scale of its two terms).
    At ``t == T`` the law is the point mass at zero.
    """
    a, T = params.a, params.deadline_T
    x0, t0, t = np.broadcast_arrays(np.asarray(x0, float), np.asarray(t0, float),
                                    np.asarray(t, float))
    if np.any(t <= t0):
        raise OrderingError("bridge_law needs t0 < t")
    _check_guard(t, params, delta_guard, allow_deadline=True)
    at_T = t == T
    ti = np.where(at_T, t0, t)  # placeholder keeps the interior formulas finite

    m, v = uncond_moments(x0, t0, ti, params)
    m_T, v_T0 = terminal_moments(x0, t0, params)
    _, v_Tt = _integrals(ti, T, params)
    if np.any(v_T0 < VAR_FLOOR):
        raise DegenerateBridgeError("v_{T|t0} under the ellipticity floor")

    decay = np.exp(-a * (T - ti))
    k = m - decay * (v / v_T0) * m_T
    R = v_Tt / (decay ** 2 * v + v_Tt)
    s2 = v * R
    s2_direct = v - decay ** 2 * v ** 2 / v_T0
    gap = np.abs(s2 - s2_direct)
    if np.any(gap[~at_T] > check_tol * np.maximum(v[~at_T], VAR_FLOOR)):
        raise ArithmeticError("bridge variance formulas disagree")

    zero = np.zeros_like(k)
    k = np.where(at_T, zero, k)
    s2 = np.where(at_T, zero, s2)
    R = np.where(at_T, zero, R)
    m_out, v_out = uncond_moments(x0, t0, t, params)
    return BridgeLaw(mean_k=k, variance_sigma2=s2, ratio_R=R,
                     uncond_mean_m=m_out, uncond_var_v=v_out)


def bridge_variance_direct(t0, t, params):
    """Unfactorized bridge variance ``v - e^{-2a(T-t)} v^2 / v_{T|t0}``."""
    _, v = _integrals(t0, t, params)
    _, v_T0 = _integrals(t0, params.deadline_T, params)
    decay2 = np.exp(-2.0 * params.a * (params.deadline_T - np.asarray(t, float)))
    return v - decay2 * v ** 2 / v_T0


def step_coefficients(params, times, delta_guard=DELTA_GUARD):
    """Affine form of the one-step bridge law along ``times``.

    Returns ``(alpha, beta, sigma)`` with
    ``X_{t_i} | X_{t_{i-1}} ~ N(alpha_i X_{t_{i-1}} + beta_i, sigma_i^2)``. The
    slope equals ``e^{-a dt} R``; a step landing on the deadline gets zeros.
    """
    times = np.asarray(times, float)
    t0, t = times[:-1], times[1:]
    if np.any(t <= t0):
        raise OrderingError("grid must be strictly increasing")
    _check_guard(t, params, delta_guard, allow_deadline=True)
    a, T = params.a, params.deadline_T
    at_T = t == T
    ti = np.where(at_T, t0, t)
    drift, v = _integrals(t0, ti, params)
    A0, v_T0 = _integrals(t0, T, params)
    _, v_Tt = _integrals(ti, T, params)
    if np.any(v_T0 < VAR_FLOOR):
        raise DegenerateBridgeError("v_{T|t0} under the ellipticity floor")
    decay = np.exp(-a * (T - ti))
    R = v_Tt / (decay ** 2 * v + v_Tt)
    alpha = np.exp(-a * (ti - t0)) * R
    beta = drift - decay * (v / v_T0) * A0
    sigma = np.sqrt(v * R)
    for arr in (alpha, beta, sigma):
        arr[at_T] = 0.0
    return alpha, beta, sigma


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def propagate(x0, alpha, beta, sigma, z):
    """Run ``x_i = alpha_i x_{i-1} + beta_i + sigma_i z_i``; ``z`` has steps on its last axis."""
    z = np.asarray(z, float)
    out = np.empty(z.shape[:-1] + (z.shape[-1] + 1,))
    out[..., 0] = x0
    x = out[..., 0]
    for i in range(z.shape[-1]):
        x = alpha[i] * x + beta[i] + sigma[i] * z[..., i]
        out[..., i + 1] = x
    return out


def simulate_path(params, x0, grid, seed, n_paths=None, delta_guard=DELTA_GUARD):
    """Sample the bridge sequentially on ``grid`` (``grid[0]`` is the start time).

    Normals come from the noise stream of :func:`ttt._rng.streams`; with
    ``n_paths`` the result has shape ``(n_paths, len(grid))``.
    """
    grid = np.asarray(grid, float)
    if grid.ndim != 1 or grid.size == 0:
        raise DomainError("grid must be a non-empty 1-d array")
    if np.any(grid > params.deadline_T):
        raise RangeError("grid extends beyond the deadline")
    noise, _ = _rng.streams(seed)
    if grid.size == 1:
        return np.full((n_paths, 1), float(x0)) if n_paths else np.array([float(x0)])
    alpha, beta, sigma = step_coefficients(params, grid, delta_guard)
    shape = (grid.size - 1,) if n_paths is None else (n_paths, grid.size - 1)
    z = noise.standard_normal(shape)
    return propagate(float(x0), alpha, beta, sigma, z)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def _times_values(series):
    if hasattr(series, "times"):
        t, x = series.times, series.values
    else:
        t, x = series
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    if t.shape != x.shape or t.ndim != 1:
        raise DomainError("times and values must be 1-d arrays of equal length")
    if t.size < 2:
        raise DomainError("need at least two observations")
    if np.any(np.diff(t) <= 0):
        raise OrderingError("observation times must be strictly increasing")
    return t, x


def gaussian_logpdf(x, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (x - mean) ** 2 / var


def step_logdensities(t, x, params):
    """Unconstrained one-step log-densities ``log f_{t_i|t_{i-1}}(x_i)``."""
    m, v = uncond_moments(x[:-1], t[:-1], t[1:], params)
    if np.any(v < VAR_FLOOR):
        raise DegenerateBridgeError("one-step variance under the floor")
    return gaussian_logpdf(x[1:], m, v)


def bridge_loglik(series, params, delta_guard=DELTA_GUARD):
    """Exact bridge log-likelihood in telescopic form, conditioning on the first point."""
    t, x = _times_values(series)
    _check_guard(t, params, delta_guard)
    steps = step_logdensities(t, x, params)
    ends = terminal_log_ratio(x[0], t[0], x[-1], t[-1], params)
    return math.fsum([*steps, float(ends)])


def bridge_logdensities(series, params, delta_guard=DELTA_GUARD):
    """Per-step bridge log-densities ``log f_{t_i|t_{i-1},T}(x_i)`` from :func:`bridge_law`."""
    t, x = _times_values(series)
    _check_guard(t, params, delta_guard)
    law = bridge_law(x[:-1], t[:-1], t[1:], params, delta_guard)
    if np.any(law.variance_sigma2 < VAR_FLOOR):
        raise DegenerateBridgeError("bridge variance under the floor")
    return gaussian_logpdf(x[1:], law.mean_k, law.variance_sigma2)


def rdcm_residuals(series, params, delta_guard=DELTA_GUARD):
    """Filtered residuals ``(x_i - k_i) / sigma_i``, one per step."""
    t, x = _times_values(series)
    _check_guard(t, params, delta_guard)
    law = bridge_law(x[:-1], t[:-1], t[1:], params, delta_guard)
    if np.any(law.variance_sigma2 <= 0):
        raise DegenerateBridgeError("zero bridge standard deviation")
    return (x[1:] - law.mean_k) / np.sqrt(law.variance_sigma2)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def default_fixed_mask(times, params):
    """Pin ``b_plus`` when the whole sample precedes ``tau``."""
    mask = {name: False for name in PARAM_NAMES}
    if np.all(np.asarray(times) < params.tau):
        mask["b_plus"] = True
    return mask


def to_internal(values, names, box=None):
    return np.array([np.log(v) if n in LOG_SCALED else v for v, n in zip(values, names)])


def from_internal(z, names):
    return np.array([np.exp(v) if n in LOG_SCALED else v for v, n in zip(z, names)])


def internal_bounds(names, box):
    lo = np.array([np.log(box[n][0]) if n in LOG_SCALED else box[n][0] for n in names])
    hi = np.array([np.log(box[n][1]) if n in LOG_SCALED else box[n][1] for n in names])
    return lo, hi


def ar1_start(t, x, box=None):
    """Mean reversion, level and volatility from a least-squares AR(1) on the mean step."""
    box = {**DEFAULT_BOX, **(box or {})}
    dt = float(np.mean(np.diff(t)))
    X = np.column_stack([x[:-1], np.ones(x.size - 1)])
    (phi1, c), *_ = np.linalg.lstsq(X, x[1:], rcond=None)
    phi1 = float(np.clip(phi1, 1e-6, 1 - 1e-9))
    a = float(np.clip(-np.log(phi1) / dt, *box["a"]))
    b = float(np.clip(c / (1 - phi1), *box["b_minus"]))
    resid = x[1:] - phi1 * x[:-1] - c
    # innovation variance of the exact discretization
    theta = np.sqrt(np.var(resid) * 2.0 * a / -np.expm1(-2.0 * a * dt))
    return {"a": a, "b_minus": b, "theta_minus": float(np.clip(theta, *box["theta_minus"]))}


def fit_rdcm(series, init, box=None, fixed_mask=None, config=None):
    """Maximize the bridge likelihood over the parameter box.

    ``init`` supplies ``tau``, ``deadline_T`` and the values of fixed entries.
    ``config`` keys: ``n_starts`` (8), ``seed`` (0), ``maxiter`` (2000),
    ``rtol`` (1e-10), ``warm_start`` (False: also start from ``init``).
    Besides the Latin hypercube, one start always takes ``a``, ``b_minus`` and
    ``theta_minus`` from :func:`ar1_start`.
    """
    t, x = _times_values(series)
    box = {**DEFAULT_BOX, **(box or {})}
    cfg = {"n_starts": 8, "seed": 0, "maxiter": 2000, "rtol": 1e-10,
           "warm_start": False, **(config or {})}

    mask = default_fixed_mask(t, init)
    if fixed_mask is None:
        if mask["b_plus"]:
            init = init.with_values(b_plus=1.0)
    else:
        mask.update(fixed_mask)
        pre_tau = np.all(t < init.tau)
        if pre_tau and not (mask["b_plus"] or mask["theta_plus"]):
            warnings.warn("all observations precede tau: b_plus and theta_plus are "
                          "not jointly identified; consider fixing b_plus = 1",
                          WeakIdentificationWarning, stacklevel=2)
    free = [n for n in PARAM_NAMES if not mask[n]]
    for n in free:
        if n in LOG_SCALED and box[n][0] <= 0:
            raise DomainError(f"box for {n} needs a positive lower bound")

    def negloglik(z):
        p = init.with_values(**dict(zip(free, from_internal(z, free))))
        try:
            val = bridge_loglik((t, x), p)
        except (DegenerateBridgeError, ArithmeticError, DomainError):
            return np.inf
        return -val if np.isfinite(val) else np.inf

    if not free:
        ll = bridge_loglik((t, x), init)
        return RdcmFit(init, ll, aic_value(ll, 0), mask,
                       {"converged": True, "iterations": 0, "starts": []})

    lo, hi = internal_bounds(free, box)
    x0 = [init.with_values(**{k: v for k, v in ar1_start(t, x, box).items() if k in free})]
    if cfg["warm_start"]:
        x0.insert(0, init)
    x0 = [np.clip(to_internal(p.vector(free), free, box), lo, hi) for p in x0]
    res = minimize_box(negloglik, lo, hi, x0=x0, n_starts=cfg["n_starts"],
                       seed=cfg["seed"], maxiter=cfg["maxiter"], rtol=cfg["rtol"])
    best = init.with_values(**dict(zip(free, from_internal(res.x, free))))
    if not np.isfinite(res.fun):
        raise FitError("no finite likelihood value found in the box", best=best)
    ll = -float(res.fun)
    report = {"converged": res.converged, "iterations": res.iterations,
              "starts": res.starts}
    if not res.converged:
        raise FitError("no optimizer start converged", best=RdcmFit(
            best, ll, aic_value(ll, len(free)), mask, report))
    on_boundary = [n for n, zi, l, h in zip(free, res.x, lo, hi)
                   if np.isclose(zi, l, rtol=0, atol=1e-6) or np.isclose(zi, h, rtol=0, atol=1e-6)]
    return RdcmFit(best, ll, aic_value(ll, len(free)), mask, report, on_boundary)


def aic_value(loglik, k):
    return 2.0 * k - 2.0 * loglik
