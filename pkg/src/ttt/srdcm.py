"""Regime-switching bridge model on the observation lattice.

A hidden Markov chain ``S_0, ..., S_{n-1}`` picks, at each observation date
``t_{i-1}``, which deadline-specific bridge generates ``X`` on
``(t_{i-1}, t_i]``. Regime indices are 0-based in this module; reports and
CSV files print them 1-based.

The forward quantity ``alpha_i(j)`` is the joint density of
``(x_1, ..., x_i, S_{i-1} = j)`` given ``x_0``, and ``beta_i(j)`` the density
of ``(x_{i+1}, ..., x_n)`` given ``(x_i, S_{i-1} = j)``. Row ``i - 1`` of the
arrays in :class:`FilterState` holds index ``i``.
"""

from dataclasses import dataclass, field, replace
import itertools
import warnings

import numpy as np
from scipy.optimize import minimize

from . import _rng
from . import rdcm
from .errors import DomainError, EMContractError, OrderingError, RangeError
from .rdcm import (DEFAULT_BOX, DELTA_GUARD, PARAM_NAMES, RdcmParams,
                   from_internal, internal_bounds, to_internal)

BRUTE_FORCE_MAX_N = 12


class RegimeCollapseWarning(UserWarning):
    """A regime received (almost) no posterior weight; its block was frozen."""


@dataclass(frozen=True, eq=False)
class SrdcmParams:
    regimes: tuple
    pi0: np.ndarray
    trans_P: np.ndarray
    delta_bar: float = 1.0 / 252.0
    allow_degenerate: bool = False

    def __post_init__(self):
        regimes = tuple(self.regimes)
        pi0 = np.asarray(self.pi0, float)
        P = np.asarray(self.trans_P, float)
        m = len(regimes)
        if m < 1:
            raise DomainError("need at least one regime")
        if pi0.shape != (m,) or P.shape != (m, m):
            raise DomainError("pi0 / trans_P shapes do not match the regime count")
        if not np.isclose(pi0.sum(), 1.0, atol=1e-10) or np.any(pi0 < 0):
            raise DomainError("pi0 must be a probability vector")
        if not np.allclose(P.sum(axis=1), 1.0, atol=1e-10) or np.any(P < 0):
            raise DomainError("trans_P must be row-stochastic")
        if not self.allow_degenerate and (np.any(pi0 <= 0) or np.any(P <= 0)):
            raise DomainError("pi0 and trans_P entries must be strictly positive")
        if not self.delta_bar > 0:
            raise DomainError("delta_bar must be positive")
        object.__setattr__(self, "regimes", regimes)
        object.__setattr__(self, "pi0", pi0)
        object.__setattr__(self, "trans_P", P)

    @property
    def m(self):
        return len(self.regimes)

    @property
    def min_deadline(self):
        return min(r.deadline_T for r in self.regimes)

    def permuted(self, order):
        """Relabel regimes: new regime ``k`` is old regime ``order[k]``."""
        order = list(order)
        return replace(self, regimes=tuple(self.regimes[k] for k in order),
                       pi0=self.pi0[order], trans_P=self.trans_P[np.ix_(order, order)])

    def canonical(self):
        """Regimes sorted by ascending deadline."""
        return self.permuted(np.argsort([r.deadline_T for r in self.regimes], kind="stable"))


@dataclass(frozen=True, eq=False)
class FilterState:
    log_alpha: np.ndarray
    log_beta: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_marginal: float


@dataclass(frozen=True, eq=False)
class DecodedPath:
    regime_indices: np.ndarray
    max_posteriors: np.ndarray


@dataclass
class EMTrace:
    log_marginals: list = field(default_factory=list)
    converged: bool = False
    collapsed: list = field(default_factory=list)

    @property
    def iterations(self):
        return max(len(self.log_marginals) - 1, 0)


# ---------------------------------------------------------------------------
# emissions and path likelihoods
# ---------------------------------------------------------------------------

def _check_horizon(t, params, delta_guard):
    if np.any(t > params.min_deadline - delta_guard):
        raise RangeError("observations extend past min_j T_j - delta")


def regime_bridge_logdensity(x_prev, x, t_prev, t, regime):
    """Regime bridge log-density built from unconstrained pieces.

    ``log f_{t|t_prev}(x) + log f_{T|t}(0) - log f_{T|t_prev}(0)``.
    """
    x_prev, x, t_prev, t = np.broadcast_arrays(*(np.asarray(v, float)
                                                 for v in (x_prev, x, t_prev, t)))
    rdcm._check_guard(t, regime, DELTA_GUARD)
    m, v = rdcm.uncond_moments(x_prev, t_prev, t, regime)
    log_part, quad_part = rdcm._terminal_increment(m, v, x, t, regime)
    return rdcm.gaussian_logpdf(x, m, v) + log_part - quad_part


def emission_logdensities(t, x, params):
    """``(n, m)`` array: entry ``[i-1, j]`` is ``log f_j(x_i | x_{i-1})``."""
    t = np.asarray(t, float)
    x = np.asarray(x, float)
    out = np.empty((t.size - 1, params.m))
    for j, reg in enumerate(params.regimes):
        out[:, j] = _regime_emissions(t, x, reg)
    bad = ~np.isfinite(out)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite emission at step {i + 1}, regime {j}")
    return out


def _series(series, params, delta_guard=DELTA_GUARD):
    t, x = rdcm._times_values(series)
    _check_horizon(t, params, delta_guard)
    return t, x


def path_conditional_loglik(series, regime_path, params, check_tol=1e-8):
    """Log-likelihood given the latent path ``regime_path`` (length ``n``).

    Constant-regime blocks are evaluated with their telescoped terminal
    correction; the unsimplified per-step sum is computed too and must agree.
    """
    t, x = _series(series, params)
    s = np.asarray(regime_path, int)
    if s.shape != (t.size - 1,):
        raise DomainError(f"regime path must have length {t.size - 1}")
    if np.any((s < 0) | (s >= params.m)):
        raise DomainError("regime index out of range")

    total = 0.0
    bounds = np.flatnonzero(np.diff(s)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, s.size]):
        reg = params.regimes[s[lo]]
        tb, xb = t[lo:hi + 1], x[lo:hi + 1]
        ends = rdcm.terminal_log_ratio(xb[0], tb[0], xb[-1], tb[-1], reg)
        total += float(ends + rdcm.step_logdensities(tb, xb, reg).sum())

    naive = 0.0
    for i in range(s.size):
        naive += float(regime_bridge_logdensity(x[i], x[i + 1], t[i], t[i + 1],
                                                params.regimes[s[i]]))
    if abs(total - naive) > check_tol * max(1.0, abs(total)):
        raise ArithmeticError("block telescoping disagrees with the per-step sum")
    return total


def path_log_probability(regime_path, params):
    s = np.asarray(regime_path, int)
    with np.errstate(divide="ignore"):
        lp = np.log(params.pi0[s[0]])
        return float(lp + np.log(params.trans_P[s[:-1], s[1:]]).sum())


def direct_loglik_bruteforce(series, params):
    """Observed log-likelihood by enumerating all ``m**n`` latent paths."""
    t, x = _series(series, params)
    n = t.size - 1
    if n > BRUTE_FORCE_MAX_N:
        raise DomainError(f"brute force enumerates m**n paths; n={n} exceeds "
                          f"{BRUTE_FORCE_MAX_N}")
    # per-regime pieces once; each path then sums its telescoped blocks
    steps = [rdcm.step_logdensities(t, x, reg) for reg in params.regimes]
    lo, hi = np.triu_indices(n + 1, k=1)
    ends = []
    for reg in params.regimes:
        table = np.zeros((n + 1, n + 1))
        table[lo, hi] = rdcm.terminal_log_ratio(x[lo], t[lo], x[hi], t[hi], reg)
        ends.append(table)
    terms = []
    for path in itertools.product(range(params.m), repeat=n):
        lp = path_log_probability(path, params)
        if lp == -np.inf:
            continue
        s = np.asarray(path)
        bounds = np.flatnonzero(np.diff(s)) + 1
        ll = 0.0
        for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, n]):
            j = s[lo]
            ll += ends[j][lo, hi] + steps[j][lo:hi].sum()
        terms.append(ll + lp)
    terms = np.array(terms)
    top = terms.max()
    return float(top + np.log(np.exp(terms - top).sum()))


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def filter_emissions(log_f, pi0, P):
    """Scaled forward-backward on precomputed emission log-densities.

    Each step normalizes its vector and accumulates the log of the normalizer
    (a streaming log-sum-exp), so nothing underflows however long the series.
    """
    n, m = log_f.shape
    row_max = log_f.max(axis=1)
    e = np.exp(log_f - row_max[:, None])

    a = np.empty((n, m))
    log_scale_a = np.empty(n)
    cur = pi0 * e[0]
    c = cur.sum()
    a[0] = cur / c
    log_scale_a[0] = np.log(c) + row_max[0]
    for i in range(1, n):
        cur = (a[i - 1] @ P) * e[i]
        c = cur.sum()
        a[i] = cur / c
        log_scale_a[i] = log_scale_a[i - 1] + np.log(c) + row_max[i]

    b = np.empty((n, m))
    log_scale_b = np.zeros(n)
    b[-1] = 1.0 / m
    log_scale_b[-1] = np.log(m)
    for i in range(n - 2, -1, -1):
        cur = P @ (e[i + 1] * b[i + 1])
        d = cur.sum()
        b[i] = cur / d
        log_scale_b[i] = log_scale_b[i + 1] + np.log(d) + row_max[i + 1]

    log_marginal = float(log_scale_a[-1])
    with np.errstate(divide="ignore"):
        log_alpha = np.log(a) + log_scale_a[:, None]
        log_beta = np.log(b) + log_scale_b[:, None]

    gamma = a * b
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = a[:-1, :, None] * P[None, :, :] * (e[1:] * b[1:])[:, None, :]
    xi /= xi.sum(axis=(1, 2), keepdims=True)
    return FilterState(log_alpha, log_beta, gamma, xi, log_marginal)


def forward_backward(series, params):
    t, x = _series(series, params)
    return filter_emissions(emission_logdensities(t, x, params), params.pi0, params.trans_P)


def local_decode(state):
    """Per-date argmax of the smoothed posteriors; ties go to the lowest index."""
    gamma = state.gamma if isinstance(state, FilterState) else np.asarray(state)
    idx = np.argmax(gamma, axis=1)
    return DecodedPath(regime_indices=idx, max_posteriors=gamma[np.arange(idx.size), idx])


def scenario_bands(decoded, strong=0.75, weak=0.5):
    """Label each date ``strong`` / ``weak`` / ``none`` by its maximal posterior."""
    g = decoded.max_posteriors
    return np.where(g >= strong, "strong", np.where(g >= weak, "weak", "none"))


# ---------------------------------------------------------------------------
# simulation and residuals
# ---------------------------------------------------------------------------

def lattice(t0, n_steps, delta_bar):
    return t0 + delta_bar * np.arange(n_steps + 1)


def simulate_srdcm(params, x0, n_steps, seed, t0=0.0, delta_guard=DELTA_GUARD):
    """Sample ``(path, regime_path)`` on ``t0 + i * delta_bar``.

    ``S_0 ~ pi0``; step ``i`` draws ``X_{t_i}`` from the bridge of
    ``S_{i-1}``, then ``S_i`` from row ``S_{i-1}`` of ``trans_P``. Normals come
    from the same stream as :func:`ttt.rdcm.simulate_path`.
    """
    grid = lattice(t0, n_steps, params.delta_bar)
    if grid[-1] > params.min_deadline - delta_guard:
        raise RangeError("t0 + n_steps * delta_bar exceeds min_j T_j - delta")
    noise, regime_rng = _rng.streams(seed)
    coeffs = [rdcm.step_coefficients(reg, grid, delta_guard) for reg in params.regimes]
    z = noise.standard_normal(n_steps)
    u = regime_rng.random(n_steps)
    cum_pi0 = np.cumsum(params.pi0)
    cum_P = np.cumsum(params.trans_P, axis=1)

    s = np.empty(n_steps, dtype=int)
    s[0] = min(np.searchsorted(cum_pi0, u[0], side="right"), params.m - 1)
    for i in range(1, n_steps):
        s[i] = min(np.searchsorted(cum_P[s[i - 1]], u[i], side="right"), params.m - 1)

    alpha = np.array([coeffs[j][0][i] for i, j in enumerate(s)])
    beta = np.array([coeffs[j][1][i] for i, j in enumerate(s)])
    sigma = np.array([coeffs[j][2][i] for i, j in enumerate(s)])
    path = rdcm.propagate(float(x0), alpha, beta, sigma, z)
    return path, s


def srdcm_residuals(series, params, decoded):
    """Standardized residuals under the decoded regime of each step."""
    t, x = _series(series, params)
    idx = decoded.regime_indices if isinstance(decoded, DecodedPath) else np.asarray(decoded)
    if idx.shape != (t.size - 1,):
        raise DomainError("decoded path length does not match the series")
    z = np.empty(t.size - 1)
    for j, reg in enumerate(params.regimes):
        sel = idx == j
        if sel.any():
            law = rdcm.bridge_law(x[:-1][sel], t[:-1][sel], t[1:][sel], reg)
            z[sel] = (x[1:][sel] - law.mean_k) / np.sqrt(law.variance_sigma2)
    return z


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def _regime_emissions(t, x, reg):
    m, v = rdcm.uncond_moments(x[:-1], t[:-1], t[1:], reg)
    if np.any(v < rdcm.VAR_FLOOR):
        raise rdcm.DegenerateBridgeError("variance under the floor")
    log_part, quad_part = rdcm._terminal_increment(m, v, x[1:], t[1:], reg)
    return rdcm.gaussian_logpdf(x[1:], m, v) + log_part - quad_part


def _regime_objective(t, x, weights, template, free):
    def negq(zvec):
        reg = template.with_values(**dict(zip(free, from_internal(zvec, free))))
        try:
            val = float(weights @ _regime_emissions(t, x, reg))
        except (ArithmeticError, DomainError, ValueError):
            return np.inf
        return -val if np.isfinite(val) else np.inf
    return negq


def default_regime_masks(t, params):
    return [rdcm.default_fixed_mask(t, reg) for reg in params.regimes]


def free_parameter_count(params, masks):
    m = params.m
    cont = sum(sum(not mk[n] for n in PARAM_NAMES) for mk in masks)
    return cont + m * (m - 1) + (m - 1)


def em_fit(series, init, config=None):
    """Baum-Welch iterations from ``init``.

    ``config`` keys: ``tol`` (1e-8, relative log-marginal improvement),
    ``max_iter`` (200), ``m_step_maxiter`` (400), ``m_step_xatol`` (1e-5,
    simplex size in log coordinates), ``masks`` (per-regime fixed masks;
    default pins ``b_plus`` for regimes whose ``tau`` follows the sample),
    ``box``, ``min_weight`` (1e-8), ``prob_floor`` (1e-12), ``ascent_tol``
    (1e-9).

    Returns ``(params, trace)``. The log-marginal is non-decreasing: the
    transition and initial updates are exact maximizers and each continuous
    block is improved by a bounded simplex started at its current value.
    """
    cfg = {"tol": 1e-8, "max_iter": 200, "m_step_maxiter": 400, "m_step_xatol": 1e-5,
           "masks": None, "box": None, "min_weight": 1e-8, "prob_floor": 1e-12,
           "ascent_tol": 1e-9, **(config or {})}
    t, x = _series(series, init)
    box = {**DEFAULT_BOX, **(cfg["box"] or {})}
    masks = cfg["masks"] or default_regime_masks(t, init)
    regimes = []
    for reg, mk in zip(init.regimes, masks):
        if mk.get("b_plus") and cfg["masks"] is None:
            reg = reg.with_values(b_plus=1.0)
        regimes.append(reg)
    params = replace(init, regimes=tuple(regimes))

    trace = EMTrace()
    log_f = emission_logdensities(t, x, params)
    state = filter_emissions(log_f, params.pi0, params.trans_P)
    trace.log_marginals.append(state.log_marginal)

    for _ in range(cfg["max_iter"]):
        gamma, xi = state.gamma, state.xi
        pi0 = np.maximum(gamma[0], cfg["prob_floor"])
        pi0 /= pi0.sum()
        counts = xi.sum(axis=0)
        P = np.maximum(counts / counts.sum(axis=1, keepdims=True), cfg["prob_floor"])
        P /= P.sum(axis=1, keepdims=True)

        new_regimes = []
        for j, (reg, mk) in enumerate(zip(params.regimes, masks)):
            w = gamma[:, j]
            free = [n for n in PARAM_NAMES if not mk[n]]
            if w.sum() < cfg["min_weight"] or not free:
                if free and j not in trace.collapsed:
                    trace.collapsed.append(j)
                    warnings.warn(f"regime {j} received no posterior weight; "
                                  "its parameters are frozen", RegimeCollapseWarning,
                                  stacklevel=2)
                new_regimes.append(reg)
                continue
            lo, hi = internal_bounds(free, box)
            z0 = np.clip(to_internal(reg.vector(free), free, box), lo, hi)
            negq = _regime_objective(t, x, w, reg, free)
            f0 = negq(z0)
            res = minimize(negq, z0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                           options={"maxiter": cfg["m_step_maxiter"], "xatol": cfg["m_step_xatol"],
                                    "fatol": 1e-10 * max(1.0, abs(f0)),
                                    "adaptive": len(free) > 3})
            if res.fun < f0:
                reg = reg.with_values(**dict(zip(free, from_internal(res.x, free))))
            new_regimes.append(reg)

        params = replace(params, regimes=tuple(new_regimes), pi0=pi0, trans_P=P)
        log_f = emission_logdensities(t, x, params)
        state = filter_emissions(log_f, params.pi0, params.trans_P)
        prev = trace.log_marginals[-1]
        trace.log_marginals.append(state.log_marginal)
        if state.log_marginal < prev - cfg["ascent_tol"] * max(1.0, abs(prev)):
            raise EMContractError(
                f"log-marginal decreased from {prev!r} to {state.log_marginal!r}")
        if state.log_marginal - prev < cfg["tol"] * max(1.0, abs(prev)):
            trace.converged = True
            break
    return params, trace


def initial_params(series, frames, order=None, delta_bar=1.0 / 252.0, window=20,
                   box=None):
    """Starting point from a two-means split of the rolling increment variance.

    ``frames`` are per-regime templates fixing ``tau`` and ``deadline_T``.
    The cluster volatilities are assigned to regimes in ``order`` (default:
    cluster ``k`` to regime ``k``, clusters sorted by ascending volatility).
    """
    t, x = rdcm._times_values(series)
    box = {**DEFAULT_BOX, **(box or {})}
    m = len(frames)
    dt = np.diff(t)
    dx = np.diff(x)

    start = rdcm.ar1_start(t, x, box)
    a, b = start["a"], start["b_minus"]

    w = min(window, dx.size)
    kernel = np.ones(w) / w
    inc2 = (dx - dx.mean()) ** 2 / dt
    local = np.convolve(inc2, kernel, mode="same")
    centers = np.quantile(local, (np.arange(m) + 0.5) / m)
    for _ in range(50):
        lab = np.argmin(np.abs(local[:, None] - centers[None, :]), axis=1)
        new = np.array([local[lab == k].mean() if np.any(lab == k) else centers[k]
                        for k in range(m)])
        if np.allclose(new, centers):
            break
        centers = new
    vols = np.sqrt(np.sort(np.maximum(centers, 1e-12)))
    order = list(range(m)) if order is None else list(order)

    regimes = []
    for j, fr in enumerate(frames):
        th = float(np.clip(vols[order[j]], *box["theta_minus"]))
        regimes.append(fr.with_values(a=a, b_minus=b, theta_minus=th))
    P = np.full((m, m), 0.1 / max(m - 1, 1)) if m > 1 else np.ones((1, 1))
    np.fill_diagonal(P, 0.9 if m > 1 else 1.0)
    return SrdcmParams(tuple(regimes), np.full(m, 1.0 / m), P, delta_bar)


def fit_srdcm(series, frames, config=None, n_restarts=4, seed=0, delta_bar=1.0 / 252.0):
    """EM from several starting points; keeps the best log-marginal.

    Restart 0 maps volatility clusters to regimes in ascending order, restart 1
    in descending order, later restarts use random assignments and jittered
    volatilities.
    """
    m = len(frames)
    rng = np.random.default_rng(_rng._as_seq(seed))
    best = None
    runs = []
    for r in range(max(n_restarts, 1)):
        if r == 0:
            order = list(range(m))
        elif r == 1:
            order = list(range(m))[::-1]
        else:
            order = list(rng.permutation(m))
        init = initial_params(series, frames, order=order, delta_bar=delta_bar,
                              box=(config or {}).get("box"))
        if r >= 2:
            jitter = np.exp(rng.normal(0.0, 0.3, m))
            box = {**DEFAULT_BOX, **((config or {}).get("box") or {})}
            init = replace(init, regimes=tuple(
                reg.with_values(theta_minus=float(np.clip(reg.theta_minus * f,
                                                          *box["theta_minus"])))
                for reg, f in zip(init.regimes, jitter)))
        params, trace = em_fit(series, init, config)
        runs.append(trace.log_marginals[-1])
        if best is None or trace.log_marginals[-1] > best[1].log_marginals[-1]:
            best = (params, trace)
    params, trace = best
    trace.restart_log_marginals = runs
    return params, trace
