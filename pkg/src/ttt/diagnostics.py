"""Residual normality test, information criterion and bootstrap standard errors."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import ndtr

from . import _rng
from . import rdcm, srdcm
from .errors import BootstrapError, DomainError, FitError
from .rdcm import PARAM_NAMES, RdcmFit, RdcmParams
from .srdcm import SrdcmParams

KS_TERMS = 100


@dataclass(frozen=True)
class KsResult:
    statistic_D: float
    p_value: float
    n: int


def kolmogorov_sf(lam):
    """Survival function of the Kolmogorov distribution, ``P(K > lam)``.

    Uses ``2 sum (-1)^{j-1} exp(-2 j^2 lam^2)`` for ``lam >= 1``. Below 1 that
    series converges slowly and cancels, so the equivalent theta-function form
    ``1 - sqrt(2 pi)/lam sum exp(-(2j-1)^2 pi^2 / (8 lam^2))`` is used instead.
    """
    lam = float(lam)
    if lam <= 0.0:
        return 1.0
    j = np.arange(1, KS_TERMS + 1)
    if lam >= 1.0:
        terms = 2.0 * (-1.0) ** (j - 1) * np.exp(-2.0 * j ** 2 * lam ** 2)
        p = math.fsum(terms)
    else:
        terms = np.exp(-(2 * j - 1) ** 2 * np.pi ** 2 / (8.0 * lam ** 2))
        p = 1.0 - math.sqrt(2.0 * np.pi) / lam * math.fsum(terms)
    return min(max(p, 0.0), 1.0)


def ks_normal(z):
    """One-sample Kolmogorov-Smirnov test against the standard normal.

    Parameters
    ----------
    z : array_like
        Residuals, at least two finite values.

    Returns
    -------
    KsResult
        ``D = sup |F_n - Phi|`` and its asymptotic p-value at ``sqrt(n) D``.
    """
    z = np.asarray(z, float).ravel()
    if z.size < 2:
        raise DomainError("the KS test needs at least two samples")
    if not np.all(np.isfinite(z)):
        raise DomainError("KS samples must be finite")
    n = z.size
    cdf = ndtr(np.sort(z))
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - cdf)
    d_minus = np.max(cdf - (i - 1) / n)
    D = float(max(d_plus, d_minus))
    return KsResult(D, kolmogorov_sf(math.sqrt(n) * D), n)


def aic(loglik, k_params):
    """``2k - 2 loglik``."""
    if k_params < 0:
        raise DomainError("parameter count must be non-negative")
    return 2.0 * k_params - 2.0 * float(loglik)


# ---------------------------------------------------------------------------
# parametric bootstrap
# ---------------------------------------------------------------------------

@dataclass
class BootstrapReport:
    n_replications: int
    estimates: dict
    mean: dict
    sd: dict
    seed: int
    failures: int
    sd_undefined: bool = False
    fit_aic: float = None
    failure_messages: list = field(default_factory=list)

    def to_dict(self):
        return {"n_replications": self.n_replications, "seed": self.seed,
                "failures": self.failures, "sd_undefined": self.sd_undefined,
                "aic": self.fit_aic,
                "parameters": {k: {"est": self.estimates[k], "mean": self.mean[k],
                                   "sd": self.sd[k]} for k in self.estimates}}


def flatten_params(params, names=PARAM_NAMES):
    """Parameter vector as an ordered ``{name: value}`` map.

    Switching models use 1-based suffixes: ``theta_minus_2``, ``p_12``.
    """
    if isinstance(params, RdcmParams):
        return {n: float(getattr(params, n)) for n in names}
    out = {}
    for j, reg in enumerate(params.regimes):
        for n in names:
            out[f"{n}_{j + 1}"] = float(getattr(reg, n))
    for h in range(params.m):
        for k in range(params.m):
            out[f"p_{h + 1}{k + 1}"] = float(params.trans_P[h, k])
    return out


def _default_rdcm_fitter(series, init):
    return rdcm.fit_rdcm(series, init, config={"warm_start": True, "n_starts": 2})


def _default_srdcm_fitter(series, init):
    return srdcm.em_fit(series, init)


def _unpack(result):
    if isinstance(result, RdcmFit):
        return result.params, result.converged
    if isinstance(result, tuple):
        params, trace = result
        return params, bool(getattr(trace, "converged", True))
    return result, True


def _replicate(args):
    fitted, grid, x0, fitter, names, seq = args
    try:
        if isinstance(fitted, RdcmParams):
            path = rdcm.simulate_path(fitted, x0, grid, seq)
        else:
            path, _ = srdcm.simulate_srdcm(fitted, x0, grid.size - 1, seq, t0=grid[0])
        params, ok = _unpack(fitter((grid, path), fitted))
    except (FitError, ArithmeticError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    if not ok:
        return None, "not converged"
    return flatten_params(params, names), None


def parametric_bootstrap(fitted_params, series_length, grid=None, fitter=None, n_reps=100,
                         seed=0, x0=None, names=None, n_workers=1, fit_aic=None):
    """Standard errors by simulate-and-refit.

    Parameters
    ----------
    fitted_params : RdcmParams or SrdcmParams
        Model to simulate from; also the warm start for every refit.
    series_length : int
        Number of steps ``n`` of each simulated series.
    grid : array_like, optional
        Observation times (``n + 1`` values). Defaults to ``delta_bar`` steps
        from 0 for switching models and to ``1/252`` steps otherwise.
    fitter : callable, optional
        ``fitter(series, init)`` returning an :class:`~ttt.rdcm.RdcmFit`, an
        ``(SrdcmParams, trace)`` pair or bare parameters.
    n_reps, seed : int
        Replication count and master seed; replication ``r`` draws from
        ``task_seeds(seed, n_reps)[r]``.
    x0 : float, optional
        Start value of each path, default the pre-deadline level ``b_minus``.
    names : sequence of str, optional
        Continuous parameters to report; default all five.
    n_workers : int
        Process pool size; 1 runs in the calling process.

    Replications that raise or do not converge are dropped and counted.
    Moments accumulate over sorted values so the report does not depend on
    replication order. A single replication gives ``sd = 0`` with
    ``sd_undefined`` set.
    """
    if n_reps < 1:
        raise DomainError("n_reps must be at least 1")
    names = tuple(names or PARAM_NAMES)
    is_switching = isinstance(fitted_params, SrdcmParams)
    if grid is None:
        step = fitted_params.delta_bar if is_switching else 1.0 / 252.0
        grid = step * np.arange(series_length + 1)
    grid = np.asarray(grid, float)
    if grid.size != series_length + 1:
        raise DomainError("grid must hold series_length + 1 times")
    if fitter is None:
        fitter = _default_srdcm_fitter if is_switching else _default_rdcm_fitter
    if x0 is None:
        x0 = (fitted_params.regimes[0] if is_switching else fitted_params).b_minus

    tasks = [(fitted_params, grid, float(x0), fitter, names, s)
             for s in _rng.task_seeds(seed, n_reps)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replicate, tasks))
    else:
        results = [_replicate(t) for t in tasks]

    draws = [r for r, _ in results if r is not None]
    messages = [m for _, m in results if m is not None]
    if not draws:
        raise BootstrapError(f"all {n_reps} bootstrap replications failed: {messages[:3]}")
    est = flatten_params(fitted_params, names)
    mean, sd = {}, {}
    for key in est:
        vals = sorted(d[key] for d in draws)
        mu = math.fsum(vals) / len(vals)
        mean[key] = mu
        if len(vals) > 1:
            sd[key] = math.sqrt(math.fsum(sorted((v - mu) ** 2 for v in vals)) / (len(vals) - 1))
        else:
            sd[key] = 0.0
    return BootstrapReport(n_replications=len(draws), estimates=est, mean=mean, sd=sd,
                           seed=int(seed), failures=n_reps - len(draws),
                           sd_undefined=len(draws) == 1, fit_aic=fit_aic,
                           failure_messages=messages)
