"""Multi-start bounded Nelder-Mead."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from . import _rng


@dataclass
class BoxResult:
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int
    starts: list


def latin_starts(lower, upper, n, seed):
    sampler = qmc.LatinHypercube(d=len(lower), seed=np.random.default_rng(_rng._as_seq(seed)))
    return qmc.scale(sampler.random(n), lower, upper)


def _nelder_mead(fun, x0, lower, upper, maxiter, rtol, max_restarts=10):
    # scipy's absolute fatol approximates a relative criterion once scaled by |f(x0)|
    f0 = fun(x0)
    scale = abs(f0) if np.isfinite(f0) and f0 != 0 else 1.0
    opts = {"maxiter": maxiter, "maxfev": 4 * maxiter, "xatol": 1e-8,
            "fatol": rtol * scale, "adaptive": len(x0) > 3}
    bounds = list(zip(lower, upper))
    with np.errstate(invalid="ignore"):  # infeasible simplices carry +inf values
        res = minimize(fun, x0, method="Nelder-Mead", bounds=bounds, options=opts)
        nit = res.nit
        # a collapsed simplex can stall away from the optimum; restart until it stops moving
        for _ in range(max_restarts):
            if not np.isfinite(res.fun):
                break
            again = minimize(fun, res.x, method="Nelder-Mead", bounds=bounds, options=opts)
            nit += again.nit
            improved = res.fun - again.fun > rtol * max(1.0, abs(res.fun))
            if again.fun <= res.fun:
                res = again
            if not improved:
                break
    res.nit = nit
    return res


def minimize_box(fun, lower, upper, x0=None, n_starts=8, seed=0, maxiter=2000, rtol=1e-10):
    """Minimize ``fun`` over the box ``[lower, upper]``.

    Starts are a Latin hypercube of size ``n_starts``, preceded by the rows
    of ``x0`` when given. Each run is a bounded Nelder-Mead simplex, restarted
    until it stops improving; the point is projected onto the box.
    ``converged`` is true when the best start met the tolerance.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    starts = []
    if x0 is not None:
        starts.extend(np.clip(np.atleast_2d(np.asarray(x0, float)), lower, upper))
    if n_starts > 0:
        starts.extend(latin_starts(lower, upper, n_starts, seed))
    best, traces = None, []
    for s in starts:
        res = _nelder_mead(fun, s, lower, upper, maxiter, rtol)
        ok = bool(res.success) and np.isfinite(res.fun)
        traces.append({"start": [float(v) for v in s], "fun": float(res.fun),
                       "nit": int(res.nit), "converged": ok})
        if best is None or res.fun < best.fun:
            best = res
    res = best
    # a non-converged best still counts when a converged start reached the same value
    tol = rtol * max(1.0, abs(res.fun)) * 10
    ok = any(t["converged"] and t["fun"] <= res.fun + tol for t in traces)
    return BoxResult(np.clip(res.x, lower, upper), float(res.fun), ok,
                     sum(t["nit"] for t in traces), traces)
