import csv
import json

import pytest

from ttt import cli
from ttt.designs import EPOCH, single_deadline, two_deadlines
from ttt.serialize import dump_json, params_to_dict


def _run(tmp_path, name, *argv):
    out = tmp_path / name
    code = cli.main([argv[0], "--out", str(out), *argv[1:]])
    report = json.loads((out / "report.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    return code, report, manifest, out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def simulated(tmp_path):
    """A single-regime series of 300 business steps and its generating parameters."""
    pfile = tmp_path / "truth.json"
    dump_json(params_to_dict(single_deadline(), EPOCH), pfile)
    code, _, _, out = _run(tmp_path, "sim", "simulate", "--params", str(pfile),
                           "--n-steps", "300", "--seed", "5")
    assert code == 0
    return out / "series.csv", pfile


def test_ingest_ok_and_errors(tmp_path, quotes_csv):
    path, data = quotes_csv
    code, report, manifest, out = _run(tmp_path, "ok", "ingest", "--quotes", str(path),
                                       "--short", "2025-08-15", "--long", "2030-08-15")
    assert code == 0 and report["n_observations"] == len(data)
    assert manifest["inputs"]["quotes.csv"] and "series.csv" in manifest["outputs"]
    assert len(_rows(out / "series.csv")) == len(data)

    bad = tmp_path / "bad.csv"
    bad.write_text("quote_date,isin,label,maturity_date\n2021-09-08,DE1,brown,2025-08-15\n")
    code, report, _, _ = _run(tmp_path, "bad", "ingest", "--quotes", str(bad),
                              "--short", "2025-08-15", "--long", "2030-08-15")
    assert code == 2 and report["error"]["column"] == "discount_factor"

    code, report, _, _ = _run(tmp_path, "empty", "ingest", "--quotes", str(path),
                              "--short", "2026-08-15", "--long", "2030-08-15")
    assert code == 3 and report["status"] == "error"


def test_fit_rdcm_and_residuals(tmp_path, simulated):
    series, _ = simulated
    code, report, manifest, out = _run(tmp_path, "fit", "fit", "--series", str(series),
                                       "--model", "rdcm", "--seed", "1", "--n-starts", "2")
    assert code == 0 and report["model"] == "rdcm"
    # the window sits before the decay start, so b_plus is pinned by default
    assert report["fixed_mask"]["b_plus"] and "warnings" not in report
    assert all("sd" not in v for v in report["parameters"].values())
    assert manifest["config"]["seed"] == 1
    code, res, _, rout = _run(tmp_path, "res", "residuals", "--series", str(series),
                              "--params", str(out / "params.json"))
    assert code == 0 and res["n"] == 300 and 0 <= res["ks_p_value"] <= 1
    assert {r["regime"] for r in _rows(rout / "residuals.csv")} == {"1"}


def test_fit_warns_when_post_tau_shape_is_free(tmp_path, simulated):
    series, _ = simulated
    cfg = tmp_path / "free.json"
    cfg.write_text(json.dumps({"fixed": {"b_plus": False}, "n_starts": 1}))
    code, report, manifest, _ = _run(tmp_path, "free", "fit", "--series", str(series),
                                     "--config", str(cfg), "--seed", "1")
    assert code == 0 and not report["fixed_mask"]["b_plus"]
    assert any("WeakIdentificationWarning" in w for w in report["warnings"])
    assert "free.json" in manifest["inputs"]


def test_fit_with_bootstrap(tmp_path, simulated):
    series, _ = simulated
    code, report, _, _ = _run(tmp_path, "boot", "fit", "--series", str(series), "--seed", "2",
                              "--n-starts", "1", "--bootstrap", "3")
    assert code == 0 and report["bootstrap"]["n_replications"] + report["bootstrap"]["failures"] == 3
    assert all("sd" in v for v in report["parameters"].values())


def test_decode_single_regime(tmp_path, simulated):
    series, pfile = simulated
    code, report, _, out = _run(tmp_path, "dec", "decode", "--series", str(series),
                                "--params", str(pfile), "--strong", "0.8")
    assert code == 0 and report["thresholds"] == {"strong": 0.8, "weak": 0.5}
    rows = _rows(out / "decode.csv")
    assert len(rows) == 300 and {r["regime"] for r in rows} == {"1"}
    assert {r["band"] for r in rows} == {"strong"}


def test_simulate_and_fit_srdcm(tmp_path):
    pfile = tmp_path / "two.json"
    dump_json(params_to_dict(two_deadlines(1 / 252), EPOCH), pfile)
    code, _, _, sim = _run(tmp_path, "sim2", "simulate", "--params", str(pfile),
                           "--n-steps", "400", "--seed", "8")
    assert code == 0 and len(_rows(sim / "regimes.csv")) == 400
    code, report, _, out = _run(tmp_path, "fit2", "fit", "--series", str(sim / "series.csv"),
                                "--model", "srdcm", "--seed", "3", "--n-restarts", "1")
    assert code == 0 and report["model"] == "srdcm"
    assert {"p_11", "p_12", "p_21", "p_22"} <= set(report["parameters"])
    code, dec, _, _ = _run(tmp_path, "dec2", "decode", "--series", str(sim / "series.csv"),
                           "--params", str(out / "params.json"))
    assert code == 0 and sum(dec["regime_counts"].values()) == 400


def test_invalid_params_exit_code(tmp_path, simulated):
    series, _ = simulated
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epoch": "2021-09-08", "a": -1.0, "tau_date": "2029-09-08",
                               "deadline_date": "2031-01-01"}))
    code, report, _, _ = _run(tmp_path, "badp", "residuals", "--series", str(series),
                              "--params", str(bad))
    assert code == 5 and report["status"] == "error"


def test_infill_rows_and_reruns(tmp_path):
    argv = ["infill", "--seed", "4", "--n-reps", "10", "--n-list", "200,400"]
    code, report, m1, a = _run(tmp_path, "a", *argv)
    assert code == 0
    rows = _rows(a / "infill.csv")
    assert len(rows) == 10 * 2 * 2 == report["n_rows"]
    _, _, m2, b = _run(tmp_path, "b", *argv)
    for name in ("infill.csv", "infill_summary.json", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    m1.pop("wall_time_s"), m2.pop("wall_time_s")
    assert m1 == m2
