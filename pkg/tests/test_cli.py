import dataclasses
import json
import time

import numpy as np
import pandas as pd
import pytest

from conftest import small_cohort
from triphase.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, load_estimation_config, main
from triphase.data import export
from triphase.errors import ConfigError
from triphase.simulation import ESTIMATORS

SMALL_SIM = """[simulation]
n1 = 1500
n2 = 500
n3 = 150
n_sims = 2
B = 2
truth = gamma
estimators = ipw,gr3,mi3
"""

EST = """[estimation]
B = {B}
seed = 3
estimators = {estimators}

[model]
family = {family}
response = y
predictors = x1,x3_1
{extra}"""


def write(path, text):
    path.write_text(text)
    return path


def est_config(tmp_path, B=5, estimators=",".join(ESTIMATORS), family="binomial", extra=""):
    return write(tmp_path / "est.ini", EST.format(B=B, estimators=estimators, family=family,
                                                  extra=extra))


@pytest.fixture(scope="module")
def sim_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = write(d / "sim.ini", SMALL_SIM)
    assert main(["simulate", "--config", str(cfg), "--out", str(d / "out"), "--jobs", "1"]) == EXIT_OK
    return d / "out"


@pytest.fixture(scope="module")
def export_500(tmp_path_factory):
    c, _ = small_cohort(n1=500, n2=250, n3=100, seed=41)
    rng = np.random.default_rng(0)
    c = dataclasses.replace(c, offset=rng.uniform(0.5, 1.5, c.n_rows))
    path = tmp_path_factory.mktemp("data") / "cohort.csv"
    export(c, path)
    return path, c


def test_simulate_writes_outputs(sim_run):
    for name in ("metrics.csv", "estimates_raw.csv", "comparison.csv", "config_resolved.ini"):
        assert (sim_run / name).is_file()
    metrics = pd.read_csv(sim_run / "metrics.csv")
    assert list(metrics.columns) == ["estimator", "coefficient", "n_ok", "n_failures", "bias",
                                     "variance", "mse", "sq_bias_share"]
    assert set(metrics["estimator"]) == {"ipw", "gr3", "mi3"}
    raw = pd.read_csv(sim_run / "estimates_raw.csv")
    assert len(raw) == 2 * 3 * 3
    comp = pd.read_csv(sim_run / "comparison.csv")
    # truth=gamma leaves the intercept target undefined
    ref = comp[(comp.estimator == "ipw") & (comp.coefficient != "alpha")]
    np.testing.assert_allclose(ref["relative_mse"], 1.0)
    assert not list(sim_run.glob("*.tmp"))


def test_resolved_config_reproduces(sim_run, tmp_path):
    out = tmp_path / "again"
    assert main(["simulate", "--config", str(sim_run / "config_resolved.ini"), "--out", str(out),
                 "--jobs", "1"]) == EXIT_OK
    for name in ("metrics.csv", "estimates_raw.csv", "config_resolved.ini"):
        assert (out / name).read_bytes() == (sim_run / name).read_bytes()


def test_report_matches_metrics(sim_run, tmp_path):
    assert main(["report", "--raws", str(sim_run / "estimates_raw.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (sim_run / "metrics.csv").read_bytes()
    assert (tmp_path / "comparison.csv").read_bytes() == (sim_run / "comparison.csv").read_bytes()


def test_report_counts_flagged_failure(sim_run, tmp_path):
    raw = (sim_run / "estimates_raw.csv").read_text().splitlines()
    header = raw[0].split(",")
    i = next(k for k, line in enumerate(raw) if ",gr3,beta1," in line)
    cells = raw[i].split(",")
    cells[header.index("estimate")] = "nan"
    cells[header.index("status")] = "NonConvergence"
    raw[i] = ",".join(cells)
    path = write(tmp_path / "raw.csv", "\n".join(raw) + "\n")
    assert main(["report", "--raws", str(path), "--out", str(tmp_path / "o")]) == 0
    m = pd.read_csv(tmp_path / "o" / "metrics.csv").set_index(["estimator", "coefficient"])
    assert m.loc[("gr3", "beta1"), "n_failures"] == 1
    assert m.loc[("gr3", "beta1"), "n_ok"] == 1
    assert m.loc[("gr3", "beta2"), "n_failures"] == 0


def test_report_empty_raws(tmp_path):
    path = write(tmp_path / "raw.csv", "")
    assert main(["report", "--raws", str(path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    path = write(tmp_path / "raw2.csv", "replicate,estimator,coefficient,estimate,se,truth,status\n")
    assert main(["report", "--raws", str(path), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_invalid_setting_names_field(tmp_path, caplog):
    cfg = write(tmp_path / "bad.ini", "[simulation]\nsetting = s9\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "setting" in caplog.text
    assert not (tmp_path / "o" / "metrics.csv").exists()


@pytest.mark.parametrize("text", [
    "[simulation]\nn_simz = 3\n",
    "[simulation]\nn_sims = three\n",
    "[simulations]\nn_sims = 3\n",
    "[simulation\n",
])
def test_bad_sim_configs(tmp_path, text):
    cfg = write(tmp_path / "bad.ini", text)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.ini"),
                 "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write(tmp_path / "sim.ini", SMALL_SIM.replace("n_sims = 2", "n_sims = 1"))
    monkeypatch.setenv("TRIPHASE_SEED", "77")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert "seed = 77" in (tmp_path / "a" / "config_resolved.ini").read_text()
    monkeypatch.setenv("TRIPHASE_SEED", "x")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_CONFIG


def test_estimation_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="colour"):
        load_estimation_config(est_config(tmp_path, extra="colour = red\n"))
    with pytest.raises(ConfigError, match="B"):
        load_estimation_config(est_config(tmp_path, B=1))
    with pytest.raises(ConfigError, match="estimators"):
        load_estimation_config(est_config(tmp_path, estimators="ipw,mi4"))
    with pytest.raises(ConfigError):
        load_estimation_config(est_config(tmp_path, family="multinomial"))
    cfg = load_estimation_config(est_config(tmp_path))
    assert cfg.B == 5 and cfg.estimators == ESTIMATORS and cfg.variance == "linearized"


def test_estimate_all_estimators(tmp_path, export_500):
    path, cohort = export_500
    out = tmp_path / "o"
    assert main(["estimate", "--data", str(path), "--config", str(est_config(tmp_path)),
                 "--out", str(out)]) == EXIT_OK
    est = pd.read_csv(out / "estimates.csv")
    assert list(est["estimator"].unique()) == list(ESTIMATORS)
    assert (est["status"] == "ok").all()
    assert len(est) == 7 * 3
    assert est["irr"].isna().all()
    assert np.all(est["ci_lo"] < est["beta"]) and np.all(est["beta"] < est["ci_hi"])
    diag = json.loads((out / "diagnostics.json").read_text())
    assert set(diag) == set(ESTIMATORS)
    assert diag["mi3"]["B"] == 5 and diag["mi2"]["B"] == 5
    assert (out / "config_resolved.ini").is_file()


def test_estimate_poisson_reports_irr(tmp_path, export_500):
    path, _ = export_500
    cfg = est_config(tmp_path, estimators="ipw,gr3", family="poisson",
                     extra="offset_column = offset\n")
    out = tmp_path / "o"
    assert main(["estimate", "--data", str(path), "--config", str(cfg), "--out", str(out)]) == 0
    est = pd.read_csv(out / "estimates.csv")
    np.testing.assert_allclose(est["irr"], np.exp(est["beta"]), rtol=1e-12)


def test_estimate_is_reproducible(tmp_path, export_500):
    path, _ = export_500
    cfg = est_config(tmp_path, B=2, estimators="mi3,gr3+mi")
    for d in ("a", "b"):
        assert main(["estimate", "--data", str(path), "--config", str(cfg),
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "estimates.csv").read_bytes() == (tmp_path / "b" / "estimates.csv").read_bytes()


def test_estimate_empty_phase3_stratum(tmp_path, export_500, caplog):
    _, c = export_500
    p3 = c.stratum_p3.copy()
    p3[np.flatnonzero(c.r1 & ~c.r2)[:5]] = "EMPTY"
    path = tmp_path / "bad.csv"
    export(dataclasses.replace(c, stratum_p3=p3), path)
    rc = main(["estimate", "--data", str(path), "--config", str(est_config(tmp_path)),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA
    assert "ZeroSamplingProbability" in caplog.text and "EMPTY" in caplog.text


def test_estimate_missing_data_file(tmp_path):
    rc = main(["estimate", "--data", str(tmp_path / "none.csv"), "--config",
               str(est_config(tmp_path)), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA


def test_estimator_isolation(tmp_path, export_500, monkeypatch):
    import triphase.cli as cli

    def boom(*a, **k):
        raise cli.NumericError("forced")

    monkeypatch.setattr(cli, "ipw", boom)
    path, _ = export_500
    out = tmp_path / "o"
    rc = main(["estimate", "--data", str(path), "--config",
               str(est_config(tmp_path, estimators="ipw,gr3")), "--out", str(out)])
    assert rc == 4
    est = pd.read_csv(out / "estimates.csv")
    assert est.loc[est.estimator == "ipw", "status"].tolist() == ["NumericError"]
    assert (est.loc[est.estimator == "gr3", "status"] == "ok").all()


@pytest.mark.slow
def test_s2_smoke_timing(tmp_path):
    cfg = write(tmp_path / "s2.ini", "[simulation]\nsetting = s2\nn_sims = 10\n")
    start = time.perf_counter()
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 0
    elapsed = time.perf_counter() - start
    print(f"s2 smoke run, 10 replicates, defaults otherwise: {elapsed:.0f} s")
    assert elapsed < 600
