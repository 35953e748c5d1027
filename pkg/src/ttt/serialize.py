"""JSON forms of model parameters.

Structural times are stored as ISO dates and converted to year fractions from
an epoch (the first observation date) with ACT/365.
"""

from datetime import date
import json

import numpy as np

from .errors import DomainError
from .market_data import date_from_years, year_fraction
from .rdcm import PARAM_NAMES, RdcmParams
from .srdcm import SrdcmParams


def _as_date(value):
    return value if isinstance(value, date) else date.fromisoformat(str(value))


def rdcm_to_dict(params, epoch):
    out = {n: float(getattr(params, n)) for n in PARAM_NAMES}
    out["tau_date"] = date_from_years(epoch, params.tau).isoformat()
    out["deadline_date"] = date_from_years(epoch, params.deadline_T).isoformat()
    return out


def rdcm_from_dict(d, epoch):
    """Accepts ``tau_date``/``deadline_date`` or ``tau``/``deadline_T`` in years."""
    try:
        if "tau_date" in d:
            tau = year_fraction(epoch, _as_date(d["tau_date"]))
            T = year_fraction(epoch, _as_date(d["deadline_date"]))
        else:
            tau, T = float(d["tau"]), float(d["deadline_T"])
        defaults = {"a": 1.0, "b_minus": 0.0, "b_plus": 1.0, "theta_minus": 0.1,
                    "theta_plus": 1.0}
        vals = {n: float(d.get(n, defaults[n])) for n in PARAM_NAMES}
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"bad regime parameters: {exc}") from None
    return RdcmParams(tau=tau, deadline_T=T, **vals)


def srdcm_to_dict(params, epoch):
    return {"regimes": [rdcm_to_dict(r, epoch) for r in params.regimes],
            "pi0": [float(v) for v in params.pi0],
            "trans_P": [[float(v) for v in row] for row in params.trans_P],
            "delta_bar": float(params.delta_bar)}


def srdcm_from_dict(d, epoch):
    regimes = tuple(rdcm_from_dict(r, epoch) for r in d["regimes"])
    m = len(regimes)
    pi0 = np.asarray(d.get("pi0", np.full(m, 1.0 / m)), float)
    if "trans_P" in d:
        P = np.asarray(d["trans_P"], float)
    else:
        P = np.full((m, m), 0.1 / max(m - 1, 1)) if m > 1 else np.ones((1, 1))
        np.fill_diagonal(P, 0.9 if m > 1 else 1.0)
    return SrdcmParams(regimes, pi0, P, float(d.get("delta_bar", 1.0 / 252.0)))


def params_to_dict(params, epoch):
    body = (rdcm_to_dict(params, epoch) if isinstance(params, RdcmParams)
            else srdcm_to_dict(params, epoch))
    return {"model": "rdcm" if isinstance(params, RdcmParams) else "srdcm",
            "epoch": epoch.isoformat(), **body}


def params_from_dict(d, epoch=None):
    """Parse either model; ``epoch`` defaults to the file's own ``epoch`` field."""
    if epoch is None:
        if "epoch" not in d:
            raise DomainError("parameter file needs an 'epoch' date")
        epoch = _as_date(d["epoch"])
    if "regimes" in d:
        return srdcm_from_dict(d, epoch)
    return rdcm_from_dict(d, epoch)


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True, default=_plain)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
