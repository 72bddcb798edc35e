"""Command-line front end.

Subcommands::

    triphase simulate --config FILE --out DIR [--jobs N]
    triphase estimate --data FILE --config FILE --out DIR
    triphase report   --raws FILE --out DIR

Configuration files are INI files.  ``simulate`` reads a ``[simulation]``
section whose keys are the :class:`~triphase.simulation.SimConfig` fields;
``estimate`` reads ``[estimation]`` and ``[model]``.  Unknown sections or
keys are rejected.  Every run writes ``config_resolved.ini`` to its output
directory; feeding it back reproduces the outputs.  ``TRIPHASE_SEED``
overrides the configured seed.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import glm
from .data import _atomic_write, ingest
from .design import from_stratified_counts, read_probability_overrides
from .errors import ConfigError, DataError, NumericError, TriphaseError
from .estimators import (
    EstimateReport,
    ipw,
    naive_influence,
    raking_with_mi,
    three_phase_raking,
    two_phase_raking,
)
from .mi import mi_estimate
from .simulation import (
    ESTIMATORS,
    MetricsTable,
    SimConfig,
    frame_to_csv,
    read_raws,
    run_monte_carlo,
)

log = logging.getLogger("triphase")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "TRIPHASE_SEED"
RESOLVED = "config_resolved.ini"


# ----------------------------------------------------------------------
# configuration


def _read_ini(path, allowed: set[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extra = set(cp.sections()) - allowed
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}; expected {sorted(allowed)}")
    return cp


def _seed_override() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None


def load_sim_config(path) -> SimConfig:
    cp = _read_ini(path, {"simulation"})
    values = dict(cp["simulation"]) if cp.has_section("simulation") else {}
    seed = _seed_override()
    if seed is not None:
        values["seed"] = str(seed)
    return SimConfig.from_mapping(values)


@dataclass(frozen=True)
class EstimationConfig:
    """Options of the ``estimate`` subcommand."""

    spec: glm.ModelSpec
    estimators: tuple[str, ...] = ESTIMATORS
    B: int = 5
    seed: int = 0
    distance: str = "poisson_deviance"
    variance: str = "linearized"
    phase2_target: str = "unweighted"
    probability_overrides: str = ""

    def as_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["estimation"] = {
            "estimators": ",".join(self.estimators), "B": str(self.B), "seed": str(self.seed),
            "distance": self.distance, "variance": self.variance,
            "phase2_target": self.phase2_target,
            "probability_overrides": self.probability_overrides,
        }
        cp["model"] = {
            "family": self.spec.family, "response": self.spec.response,
            "predictors": ",".join(self.spec.predictors),
            "offset_column": self.spec.offset_column or "",
            "intercept": str(self.spec.intercept).lower(),
        }
        return _ini_text(cp)


_EST_KEYS = {"estimators", "B", "seed", "distance", "variance", "phase2_target",
             "probability_overrides"}
_MODEL_KEYS = {"family", "response", "predictors", "offset_column", "intercept"}


def _int(section, key, raw) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}") from None


def load_estimation_config(path) -> EstimationConfig:
    cp = _read_ini(path, {"estimation", "model"})
    est = dict(cp["estimation"]) if cp.has_section("estimation") else {}
    mod = dict(cp["model"]) if cp.has_section("model") else {}
    for section, got, allowed in (("estimation", est, _EST_KEYS), ("model", mod, _MODEL_KEYS)):
        unknown = set(got) - allowed
        if unknown:
            raise ConfigError(f"[{section}] unknown key(s) {sorted(unknown)}")
    if "family" not in mod:
        raise ConfigError("[model] family is required")
    predictors = tuple(p.strip() for p in mod.get("predictors", "").split(",") if p.strip())
    spec = glm.ModelSpec(
        family=mod["family"].strip(), response=mod.get("response", "y").strip(),
        predictors=predictors, offset_column=mod.get("offset_column", "").strip() or None,
        intercept=mod.get("intercept", "true").strip().lower() in ("1", "true", "yes"))
    if spec.family == "multinomial":
        raise ConfigError("[model] family: the analysis model must be poisson or binomial")
    names = tuple(e.strip() for e in est.get("estimators", ",".join(ESTIMATORS)).split(",")
                  if e.strip())
    unknown = [e for e in names if e not in ESTIMATORS]
    if unknown or not names:
        raise ConfigError(f"[estimation] estimators: unknown or empty {unknown}; "
                          f"choose from {ESTIMATORS}")
    B = _int("estimation", "B", est.get("B", "5"))
    if B < 2:
        raise ConfigError("[estimation] B: at least 2 imputations are required")
    seed = _int("estimation", "seed", est.get("seed", "0"))
    env = _seed_override()
    if env is not None:
        seed = env
    distance = est.get("distance", "poisson_deviance").strip()
    if distance not in ("poisson_deviance", "chi_square"):
        raise ConfigError("[estimation] distance: expected poisson_deviance or chi_square")
    variance = est.get("variance", "linearized").strip()
    if variance not in ("linearized", "sandwich"):
        raise ConfigError("[estimation] variance: expected linearized or sandwich")
    target = est.get("phase2_target", "unweighted").strip()
    if target not in ("unweighted", "w1"):
        raise ConfigError("[estimation] phase2_target: expected unweighted or w1")
    return EstimationConfig(spec=spec, estimators=names, B=B, seed=seed, distance=distance,
                            variance=variance, phase2_target=target,
                            probability_overrides=est.get("probability_overrides", "").strip())


def _ini_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def sim_config_ini(config: SimConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["simulation"] = config.as_mapping()
    return _ini_text(cp)


# ----------------------------------------------------------------------
# outputs


def comparison_table(summary: pd.DataFrame, reference: str = "ipw") -> pd.DataFrame:
    """MSE of each estimator relative to ``reference`` (below 1 means more efficient)."""
    ref = summary[summary["estimator"] == reference].set_index("coefficient")["mse"]
    out = summary[["estimator", "coefficient", "bias", "mse"]].copy()
    out["relative_mse"] = [
        row.mse / ref[row.coefficient] if row.coefficient in ref.index else float("nan")
        for row in out.itertuples()]
    return out.reset_index(drop=True)


def _write_metrics(table: MetricsTable, out: Path, raw: bool = True) -> None:
    if raw:
        _atomic_write(out / "estimates_raw.csv", table.raw_csv())
    _atomic_write(out / "metrics.csv", table.metrics_csv())
    _atomic_write(out / "comparison.csv", frame_to_csv(comparison_table(table.summary)))


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


# ----------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    config = load_sim_config(args.config)
    out = _outdir(args.out)
    _atomic_write(out / RESOLVED, sim_config_ini(config))
    jobs = args.jobs or os.cpu_count() or 1
    log.info("simulating setting %s: %d replicates, B=%d, %d job(s)",
             config.setting, config.n_sims, config.B, jobs)
    table = run_monte_carlo(config, jobs=jobs)
    _write_metrics(table, out)
    failures = int(table.summary["n_failures"].sum())
    if failures:
        log.warning("%d estimator-replicate failures excluded (see n_failures)", failures)
    log.info("wrote %s", out)
    return EXIT_OK


def run_estimators(cohort, design, config: EstimationConfig
                   ) -> tuple[dict[str, EstimateReport], dict[str, TriphaseError | Exception]]:
    """Run the requested estimators with per-estimator isolation."""
    spec = config.spec
    kw = {"distance": config.distance, "variance": config.variance}
    reports: dict[str, EstimateReport] = {}
    errors: dict[str, Exception] = {}
    cache: dict = {}

    def attempt(name, fn):
        try:
            reports[name] = fn()
        except (TriphaseError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("%s failed: %s: %s", name, type(exc).__name__, exc)
            errors[name] = exc

    def naive():
        if "naive" not in cache:
            cache["naive"] = naive_influence(cohort, spec, "star")
        return cache["naive"]

    wanted = set(config.estimators)
    if "ipw" in wanted:
        attempt("ipw", lambda: ipw(cohort, design, spec))
    if "gr2" in wanted:
        attempt("gr2", lambda: two_phase_raking(cohort, design, spec, aux=naive(), **kw))
    if "gr3" in wanted:
        attempt("gr3", lambda: three_phase_raking(cohort, design, spec, aux_p1=naive(),
                                                  phase2_target=config.phase2_target, **kw))
    root = np.random.SeedSequence(config.seed)
    for k, (mode, name, gr, phases) in enumerate((("two_phase", "mi2", "gr2+mi", 2),
                                                  ("three_phase", "mi3", "gr3+mi", 3))):
        if name not in wanted and gr not in wanted:
            continue
        ss = np.random.SeedSequence(root.entropy, spawn_key=(k,))
        try:
            rep, imp = mi_estimate(cohort, spec, config.B, mode, ss, design=design,
                                   auxiliary=gr in wanted, keep_datasets=False)
        except (TriphaseError, ValueError, np.linalg.LinAlgError) as exc:
            log.error("%s imputation failed: %s: %s", mode, type(exc).__name__, exc)
            for n in (name, gr):
                if n in wanted:
                    errors[n] = exc
            continue
        if name in wanted:
            reports[name] = rep
        if gr in wanted:
            attempt(gr, lambda imp=imp, phases=phases: raking_with_mi(
                cohort, design, spec, imp, phases=phases,
                phase2_target=config.phase2_target, **kw))
    return reports, errors


def _exit_for(exc: Exception) -> int:
    if isinstance(exc, TriphaseError):
        return exc.exit_code if exc.exit_code in (2, 3, 4) else EXIT_NUMERIC
    return EXIT_NUMERIC


def cmd_estimate(args) -> int:
    config = load_estimation_config(args.config)
    out = _outdir(args.out)
    _atomic_write(out / RESOLVED, config.as_ini())
    try:
        cohort = ingest(args.data)
    except OSError as exc:
        raise DataError(f"cannot read {args.data}: {exc}") from None
    overrides = (read_probability_overrides(config.probability_overrides)
                 if config.probability_overrides else None)
    design = from_stratified_counts(cohort, overrides)
    log.info("cohort: n1=%d n2=%d n3=%d", cohort.n1, cohort.n2, cohort.n3)
    reports, errors = run_estimators(cohort, design, config)
    records = []
    diagnostics = {}
    for name in config.estimators:
        if name in reports:
            rep = reports[name]
            for rec in rep.records():
                rec["status"] = "ok"
                records.append(rec)
            diagnostics[name] = {"status": "ok", **rep.diagnostics}
        else:
            exc = errors[name]
            records.append({"estimator": name, "term": "", "beta": float("nan"),
                            "se": float("nan"), "ci_lo": float("nan"), "ci_hi": float("nan"),
                            "irr": float("nan"), "status": type(exc).__name__})
            diagnostics[name] = {"status": type(exc).__name__, "message": str(exc)}
    frame = pd.DataFrame(records, columns=["estimator", "term", "beta", "se", "ci_lo", "ci_hi",
                                           "irr", "status"])
    _atomic_write(out / "estimates.csv", frame_to_csv(frame))
    _atomic_write(out / "diagnostics.json",
                  json.dumps(diagnostics, indent=2, sort_keys=True, default=_jsonable) + "\n")
    if errors:
        first = errors[next(n for n in config.estimators if n in errors)]
        return _exit_for(first)
    return EXIT_OK


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


def cmd_report(args) -> int:
    raw = read_raws(args.raws)
    out = _outdir(args.out)
    _write_metrics(MetricsTable(raw), out, raw=False)
    log.info("wrote %s", out)
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triphase",
                                description="Estimators for three-phase validation studies.")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging on standard error (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="run a Monte Carlo comparison")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=None,
                   help="parallel replicates (default: number of CPUs)")
    s.set_defaults(func=cmd_simulate)
    e = sub.add_parser("estimate", help="fit the estimators to a data file")
    e.add_argument("--data", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)
    r = sub.add_parser("report", help="summarize raw Monte Carlo estimates")
    r.add_argument("--raws", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        log.error("--jobs must be at least 1")
        return EXIT_CONFIG
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        log.error("data error: %s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numerical failure: %s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
