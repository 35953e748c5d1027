"""Command line entry point: ``ttt ingest|fit|decode|residuals|simulate|infill``.

Every command writes into ``--out`` a ``report.json`` (holding an ``error``
object on failure) and a ``manifest.json`` listing the resolved config, seed,
input hashes and output files. Settings resolve as flag > ``--config`` file >
default. Exit codes: 0 success, 1 unexpected error, 2 parse error or missing
column, 3 empty series, 4 fit failure, 5 invalid input or parameters.
"""

import argparse
from datetime import date
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from . import designs, diagnostics, infill, market_data, rdcm, srdcm
from .errors import (BootstrapError, EMContractError, EmptySeriesError, FitError,
                     ParseError)
from .rdcm import PARAM_NAMES, RdcmParams
from .serialize import dump_json, load_json, params_from_dict, params_to_dict, rdcm_from_dict
from .srdcm import SrdcmParams

EXIT_OK, EXIT_UNEXPECTED, EXIT_PARSE, EXIT_EMPTY, EXIT_FIT, EXIT_INPUT = 0, 1, 2, 3, 4, 5


class _Run:
    """Collects config, inputs and outputs of one command for the manifest."""

    def __init__(self, command, args, config):
        self.command = command
        self.args = args
        self.config = config
        self.resolved = {}
        self.inputs = {}
        self.outputs = []
        self.out_dir = args.out
        os.makedirs(self.out_dir, exist_ok=True)

    def get(self, name, default=None, flag=None):
        value = getattr(self.args, flag or name, None)
        if value is None:
            value = self.config.get(name, default)
        self.resolved[name] = value
        return value

    def input(self, path):
        with open(path, "rb") as fh:
            self.inputs[os.path.basename(path)] = hashlib.sha256(fh.read()).hexdigest()
        return path

    def output(self, name):
        self.outputs.append(name)
        return os.path.join(self.out_dir, name)


def _seed(run):
    seed = run.get("seed")
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2 ** 63))
        run.resolved["seed"] = seed
        run.resolved["seed_generated"] = True
    return int(seed)


def _load_series(run, path, grid=None):
    series = market_data.read_series_csv(run.input(path))
    grid = grid or run.get("grid", "business")
    if grid == "business":
        series = market_data.regularize_grid(series, float(run.get("delta_bar", 1.0 / 252.0)))
    elif grid != "calendar":
        raise ValueError(f"grid must be 'business' or 'calendar', got {grid!r}")
    return series


def _step_dates(series):
    return [d.isoformat() for d in series.dates[1:]]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(run):
    quotes = run.get("quotes")
    if quotes is None:
        raise ValueError("ingest needs --quotes")
    short = date.fromisoformat(str(run.get("short_maturity")))
    long = date.fromisoformat(str(run.get("long_maturity")))
    series = market_data.ingest_quotes(run.input(quotes), short, long,
                                       run.get("day_count", "ACT/365"))
    market_data.write_series_csv(series, run.output("series.csv"))
    return {"n_observations": len(series), "first_date": series.t0.isoformat(),
            "spacing_h": series.spacing_h, **series.report}


def _initial_rdcm(series, tau_date, deadline_date, init_cfg):
    x, t = series.values, series.times
    dx = np.diff(x)
    vol = float(np.std(dx) / np.sqrt(np.mean(np.diff(t)))) if dx.size > 1 else 0.1
    base = {"a": 1.0, "b_minus": float(np.mean(x)), "b_plus": 1.0,
            "theta_minus": max(vol, 1e-3), "theta_plus": 1.0,
            "tau_date": tau_date, "deadline_date": deadline_date}
    base.update(init_cfg or {})
    return rdcm_from_dict(base, series.t0)


def _fit_rdcm(run, series, seed):
    tau_date = run.get("tau_date", designs.NEAR_TAU.isoformat())
    deadline_date = run.get("deadline_date", designs.NEAR_DEADLINE.isoformat())
    init = _initial_rdcm(series, tau_date, deadline_date, run.get("init"))
    fixed = run.get("fixed")
    box = run.get("box")
    cfg = {"n_starts": int(run.get("n_starts", 8)), "seed": seed,
           "maxiter": int(run.get("maxiter", 2000))}
    try:
        fit = rdcm.fit_rdcm(series, init, box=box, fixed_mask=fixed, config=cfg)
    except FitError as exc:
        exc.report = {"best_loglik": getattr(exc.best, "loglik", None)}
        raise
    free = [n for n in PARAM_NAMES if not fit.fixed_mask[n]]
    report = {"model": "rdcm", "loglik": fit.loglik,
              "aic": diagnostics.aic(fit.loglik, len(free)), "k_params": len(free),
              "converged": fit.converged, "fixed_mask": fit.fixed_mask,
              "on_boundary": fit.on_boundary, "iterations": fit.optimizer_report["iterations"],
              "starts": fit.optimizer_report["starts"],
              "parameters": {n: {"est": float(getattr(fit.params, n))} for n in free}}
    return fit.params, report, free


def _fit_srdcm(run, series, seed):
    delta_bar = float(run.get("delta_bar", 1.0 / 252.0))
    regimes_cfg = run.get("regimes") or [
        {"tau_date": designs.NEAR_TAU.isoformat(), "deadline_date": designs.NEAR_DEADLINE.isoformat()},
        {"tau_date": designs.FAR_TAU.isoformat(), "deadline_date": designs.FAR_DEADLINE.isoformat()}]
    frames = [rdcm_from_dict(r, series.t0) for r in regimes_cfg]
    em_cfg = dict(run.get("em") or {})
    params, trace = srdcm.fit_srdcm(series, frames, config=em_cfg,
                                    n_restarts=int(run.get("n_restarts", 4)), seed=seed,
                                    delta_bar=delta_bar)
    masks = em_cfg.get("masks") or srdcm.default_regime_masks(series.times, params)
    k = srdcm.free_parameter_count(params, masks)
    order = np.argsort([r.deadline_T for r in params.regimes], kind="stable")
    params = params.permuted(order)
    masks = [masks[i] for i in order]
    ll = trace.log_marginals[-1]
    names = []
    pars = {}
    for j, (reg, mk) in enumerate(zip(params.regimes, masks)):
        for n in PARAM_NAMES:
            if not mk[n]:
                names.append(n)
                pars[f"{n}_{j + 1}"] = {"est": float(getattr(reg, n))}
    for h in range(params.m):
        for kk in range(params.m):
            pars[f"p_{h + 1}{kk + 1}"] = {"est": float(params.trans_P[h, kk])}
    report = {"model": "srdcm", "loglik": ll, "aic": diagnostics.aic(ll, k), "k_params": k,
              "converged": trace.converged, "em_iterations": trace.iterations,
              "restart_log_marginals": trace.restart_log_marginals,
              "pi0": [float(v) for v in params.pi0], "parameters": pars}
    return params, report, sorted(set(names), key=PARAM_NAMES.index)


def cmd_fit(run):
    seed = _seed(run)
    model = run.get("model", "rdcm")
    series = _load_series(run, run.get("series"))
    if model == "rdcm":
        params, report, free = _fit_rdcm(run, series, seed)
    elif model == "srdcm":
        params, report, free = _fit_srdcm(run, series, seed)
    else:
        raise ValueError(f"unknown model {model!r}")
    n_boot = int(run.get("bootstrap", 0))
    if n_boot > 0:
        boot = diagnostics.parametric_bootstrap(
            params, len(series) - 1, grid=series.times, n_reps=n_boot, seed=seed,
            x0=float(series.values[0]), names=free, n_workers=int(run.get("threads", 1) or 1))
        for key, entry in report["parameters"].items():
            if key in boot.sd:
                entry["sd"] = boot.sd[key]
        report["bootstrap"] = {"n_replications": boot.n_replications,
                               "failures": boot.failures, "sd_undefined": boot.sd_undefined}
    dump_json(params_to_dict(params, series.t0), run.output("params.json"))
    return report


def _load_params(run, series):
    return params_from_dict(load_json(run.input(run.get("params"))), series.t0)


def _as_switching(params):
    if isinstance(params, RdcmParams):
        return SrdcmParams((params,), np.ones(1), np.ones((1, 1)))
    return params


def cmd_decode(run):
    series = _load_series(run, run.get("series"))
    params = _as_switching(_load_params(run, series))
    strong = float(run.get("strong", 0.75))
    weak = float(run.get("weak", 0.5))
    state = srdcm.forward_backward(series, params)
    dec = srdcm.local_decode(state)
    bands = srdcm.scenario_bands(dec, strong, weak)
    with open(run.output("decode.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("date,regime,gamma_max,band\n")
        for d, j, g, b in zip(_step_dates(series), dec.regime_indices, dec.max_posteriors, bands):
            fh.write(f"{d},{j + 1},{g:.12g},{b}\n")
    counts = np.bincount(dec.regime_indices, minlength=params.m)
    return {"log_marginal": state.log_marginal, "thresholds": {"strong": strong, "weak": weak},
            "regime_counts": {str(j + 1): int(c) for j, c in enumerate(counts)},
            "band_counts": {b: int(np.sum(bands == b)) for b in ("strong", "weak", "none")}}


def cmd_residuals(run):
    series = _load_series(run, run.get("series"))
    params = _load_params(run, series)
    if isinstance(params, RdcmParams):
        z = rdcm.rdcm_residuals(series, params)
        regimes = np.zeros(z.size, dtype=int)
    else:
        dec = srdcm.local_decode(srdcm.forward_backward(series, params))
        z = srdcm.srdcm_residuals(series, params, dec)
        regimes = dec.regime_indices
    with open(run.output("residuals.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("date,regime,z\n")
        for d, j, v in zip(_step_dates(series), regimes, z):
            fh.write(f"{d},{j + 1},{v:.12g}\n")
    ks = diagnostics.ks_normal(z)
    return {"n": ks.n, "ks_D": ks.statistic_D, "ks_p_value": ks.p_value,
            "mean": float(np.mean(z)), "sd": float(np.std(z, ddof=1))}


def cmd_simulate(run):
    seed = _seed(run)
    epoch = date.fromisoformat(str(run.get("epoch", designs.EPOCH.isoformat())))
    params = params_from_dict(load_json(run.input(run.get("params"))), epoch)
    n_steps = int(run.get("n_steps", 250))
    delta_bar = float(run.get("delta_bar", getattr(params, "delta_bar", 1.0 / 252.0)))
    if isinstance(params, RdcmParams):
        x0 = float(run.get("x0", params.b_minus))
        grid = delta_bar * np.arange(n_steps + 1)
        path = rdcm.simulate_path(params, x0, grid, seed)
        regimes = None
    else:
        x0 = float(run.get("x0", params.regimes[0].b_minus))
        params = SrdcmParams(params.regimes, params.pi0, params.trans_P, delta_bar)
        path, regimes = srdcm.simulate_srdcm(params, x0, n_steps, seed)
        grid = srdcm.lattice(0.0, n_steps, delta_bar)
    dates = tuple(market_data.date_from_years(epoch, t) for t in grid)
    if len(set(dates)) != len(dates):
        raise ValueError("delta_bar is below one calendar day; dates would repeat")
    series = market_data.NodeDiffSeries(t0=epoch, times=grid, values=path, dates=dates)
    market_data.write_series_csv(series, run.output("series.csv"))
    if regimes is not None:
        with open(run.output("regimes.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("date,regime\n")
            for d, j in zip(dates[1:], regimes):
                fh.write(f"{d.isoformat()},{j + 1}\n")
    return {"n_steps": n_steps, "delta_bar": delta_bar, "x0": x0,
            "x_last": float(path[-1])}


def _frame(d):
    return RdcmParams(a=float(d["a"]), b_minus=float(d["b_minus"]),
                      b_plus=float(d.get("b_plus", 1.0)), theta_minus=float(d.get("theta_minus", 0.1)),
                      theta_plus=float(d.get("theta_plus", 1.0)), tau=float(d["tau"]),
                      deadline_T=float(d["deadline_T"]))


def cmd_infill(run):
    seed = _seed(run)
    n_list = [int(n) for n in run.get("n_list", [250, 500, 1000, 2000, 4000])]
    n_reps = int(run.get("n_reps", 20))
    experiment = run.get("experiment", "rdcm")
    t0 = float(run.get("t0", 0.0))
    l = run.get("l")
    l = None if l is None else float(l)
    if experiment == "rdcm":
        frame = _frame(run.get("frame") or {
            **{n: getattr(designs.single_deadline(), n) for n in PARAM_NAMES},
            "tau": designs.single_deadline().tau,
            "deadline_T": designs.single_deadline().deadline_T})
        theta0 = run.get("theta0") or [frame.theta_minus, frame.theta_plus]
        res = infill.rdcm_consistency_experiment(tuple(theta0), frame, n_list, n_reps, seed,
                                                 t0=t0, l=l, box=run.get("box"))
    elif experiment == "switching":
        frames_cfg = run.get("frames")
        if not frames_cfg:
            raise ValueError("switching experiments need 'frames' in the config")
        frames = [_frame(f) for f in frames_cfg]
        theta0s = [tuple(th) for th in (run.get("theta0") or
                                        [[f.theta_minus, f.theta_plus] for f in frames])]
        Q = np.asarray(run.get("Q"), float)
        res = infill.switching_consistency_experiment(
            theta0s, frames, Q, n_list, n_reps, seed, t0=t0, l=l, box=run.get("box"),
            mode=run.get("mode", "conditional"), n_paths=int(run.get("n_paths", 256)))
    else:
        raise ValueError(f"unknown experiment {experiment!r}")
    res.write_csv(run.output("infill.csv"))
    res.write_summary(run.output("infill_summary.json"))
    return {"experiment": experiment, "n_rows": len(res.rows), "trends": res.summary["trends"]}


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "decode": cmd_decode,
            "residuals": cmd_residuals, "simulate": cmd_simulate, "infill": cmd_infill}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker pool cap")

    parser = argparse.ArgumentParser(prog="ttt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="quotes CSV -> node-difference series")
    p.add_argument("--quotes")
    p.add_argument("--short", dest="short_maturity")
    p.add_argument("--long", dest="long_maturity")
    p.add_argument("--day-count", dest="day_count")

    series_opts = argparse.ArgumentParser(add_help=False)
    series_opts.add_argument("--series", help="series CSV (date,t_years,x_value)")
    series_opts.add_argument("--grid", choices=("business", "calendar"))
    series_opts.add_argument("--delta-bar", dest="delta_bar", type=float)

    p = sub.add_parser("fit", parents=[common, series_opts], help="fit rdcm or srdcm")
    p.add_argument("--model", choices=("rdcm", "srdcm"))
    p.add_argument("--bootstrap", type=int, help="bootstrap replications (0: none)")
    p.add_argument("--n-starts", dest="n_starts", type=int)
    p.add_argument("--n-restarts", dest="n_restarts", type=int)

    p = sub.add_parser("decode", parents=[common, series_opts], help="local decoding")
    p.add_argument("--params")
    p.add_argument("--strong", type=float)
    p.add_argument("--weak", type=float)

    p = sub.add_parser("residuals", parents=[common, series_opts], help="residuals and KS test")
    p.add_argument("--params")

    p = sub.add_parser("simulate", parents=[common], help="simulate a series")
    p.add_argument("--params")
    p.add_argument("--n-steps", dest="n_steps", type=int)
    p.add_argument("--x0", type=float)
    p.add_argument("--epoch")
    p.add_argument("--delta-bar", dest="delta_bar", type=float)

    p = sub.add_parser("infill", parents=[common], help="infill consistency experiment")
    p.add_argument("--experiment", choices=("rdcm", "switching"))
    p.add_argument("--mode", choices=("conditional", "marginal"))
    p.add_argument("--n-reps", dest="n_reps", type=int)
    p.add_argument("--n-list", dest="n_list", type=lambda s: [int(v) for v in s.split(",")])
    return parser


def _error_body(exc):
    body = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("row", "column"):
        if getattr(exc, attr, None) is not None:
            body[attr] = getattr(exc, attr)
    if getattr(exc, "report", None):
        body.update(exc.report)
    return body


def _exit_code(exc):
    if isinstance(exc, ParseError):
        return EXIT_PARSE
    if isinstance(exc, EmptySeriesError):
        return EXIT_EMPTY
    if isinstance(exc, (FitError, EMContractError, BootstrapError)):
        return EXIT_FIT
    if isinstance(exc, (ValueError, ArithmeticError, OSError)):
        return EXIT_INPUT
    return EXIT_UNEXPECTED


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = {}
    if args.config:
        try:
            config = load_json(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"ttt: cannot read config {args.config}: {exc}", file=sys.stderr)
            return EXIT_PARSE
    run = _Run(args.command, args, config)
    if args.config:
        run.input(args.config)
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            result = COMMANDS[args.command](run)
            report = {"command": args.command, "status": "ok", **result}
            code = EXIT_OK
        except Exception as exc:  # reported as JSON, mapped to an exit code
            code = _exit_code(exc)
            if code == EXIT_UNEXPECTED:
                raise
            report = {"command": args.command, "status": "error", "error": _error_body(exc)}
            print(f"ttt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    messages = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    for msg in messages:
        print(f"ttt {args.command}: warning: {msg}", file=sys.stderr)
    if messages:
        report["warnings"] = messages
    dump_json(report, run.output("report.json"))
    manifest = {"command": args.command, "config": run.resolved, "seed": run.resolved.get("seed"),
                "inputs": run.inputs, "outputs": sorted(run.outputs + ["manifest.json"]),
                "wall_time_s": round(time.perf_counter() - start, 3),
                "version": __version__}
    dump_json(manifest, os.path.join(run.out_dir, "manifest.json"))
    return code


if __name__ == "__main__":
    sys.exit(main())
