"""Monte Carlo comparison of the estimators on synthetic three-phase cohorts.

Each subject is followed for up to three periods of at most six months.
The time-constant covariate ``X2`` is redrawn per period and ``X1`` per
month.  Within a period the event time follows a Weibull proportional
hazards model with cumulative baseline hazard ``(t / scale) ** shape``
(``t`` in months since the period start); the period ends in the month of
an event.  Error-prone outcomes follow ``Pr(Y* = 1 | Y) = exp(a + b Y)``
and exposures carry additive normal noise.

Randomness is drawn from ``SeedSequence(seed, spawn_key=(replicate, k))``
so every replicate and stream is independent of execution order.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from . import glm
from .data import Cohort
from .design import from_stratified_counts
from .errors import ConfigError, SchemaError, StratumExhausted, TriphaseError
from .estimators import (
    EstimateReport,
    ipw,
    naive_influence,
    raking_with_mi,
    three_phase_raking,
    two_phase_raking,
)
from .mi import mi_estimate

log = logging.getLogger(__name__)

SETTINGS = ("s1", "s2", "high_error", "misspecified")
ESTIMATORS = ("ipw", "gr2", "gr3", "gr2+mi", "gr3+mi", "mi2", "mi3")
COEFFICIENTS = ("alpha", "beta1", "beta2")
ANALYSIS_SPEC = glm.ModelSpec("binomial", "y", ("x1", "x3_1"))
RAW_COLUMNS = ("replicate", "estimator", "coefficient", "estimate", "se", "truth", "status")
METRIC_COLUMNS = ("estimator", "coefficient", "n_ok", "n_failures", "bias", "variance", "mse",
                  "sq_bias_share")
HIGH_ERROR_YSTAR = (-2.5, 1.75)
TRUTH_SEED = 20240917

# stream indices within a replicate
GEN, SAMPLE, MI2, MI3 = range(4)


@dataclass(frozen=True)
class SimConfig:
    n1: int = 15000
    months_max: int = 18
    n_periods: int = 3
    period_len_max: int = 6
    weibull_shape: float = 0.5
    weibull_scale_base: float = 100.0
    gamma1: float = 0.5
    gamma2: float = 0.5
    ystar_intercept: float = -3.5
    ystar_slope: float = 3.25
    ytilde_intercept: float = -5.0
    ytilde_slope: float = 4.75
    var_ustar: float = 1.0
    var_utilde: float = 0.1
    n2: int = 2500
    n3: int = 250
    setting: str = "s1"
    n_sims: int = 200
    B: int = 50
    seed: int = 1
    distance: str = "poisson_deviance"
    truth: str = "population"
    truth_subjects: int = 2_000_000
    estimators: tuple[str, ...] = ESTIMATORS

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting: {self.setting!r} is not one of {SETTINGS}")
        if isinstance(self.estimators, str):
            object.__setattr__(self, "estimators",
                               tuple(e.strip() for e in self.estimators.split(",") if e.strip()))
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown or not self.estimators:
            raise ConfigError(f"estimators: unknown or empty {unknown}; choose from {ESTIMATORS}")
        if not (0 < self.n3 <= self.n2 <= self.n1):
            raise ConfigError("n3, n2, n1: require 0 < n3 <= n2 <= n1")
        if self.n2 % 2 or (self.setting == "s2" and self.n3 < 4) or self.n3 < 2:
            raise ConfigError("n2 must be even and n3 large enough to fill every phase-3 stratum")
        if self.var_ustar <= 0 or self.var_utilde <= 0:
            raise ConfigError("var_ustar, var_utilde: measurement-error variances must be positive")
        if self.weibull_shape <= 0 or self.weibull_scale_base <= 0:
            raise ConfigError("weibull_shape, weibull_scale_base: must be positive")
        if self.months_max > self.n_periods * self.period_len_max or self.months_max < 1:
            raise ConfigError("months_max: must lie in [1, n_periods * period_len_max]")
        if self.n_sims < 1 or self.B < 2:
            raise ConfigError("n_sims must be >= 1 and B >= 2")
        if self.truth not in ("population", "gamma"):
            raise ConfigError("truth: expected 'population' or 'gamma'")
        if self.distance not in ("poisson_deviance", "chi_square"):
            raise ConfigError("distance: expected 'poisson_deviance' or 'chi_square'")
        if self.truth_subjects < 1000:
            raise ConfigError("truth_subjects: at least 1000")

    @property
    def ystar_params(self) -> tuple[float, float]:
        if self.setting == "high_error":
            return HIGH_ERROR_YSTAR
        return self.ystar_intercept, self.ystar_slope

    @property
    def phase3_design(self) -> str:
        return "s2" if self.setting == "s2" else "s1"

    @classmethod
    def from_mapping(cls, mapping) -> "SimConfig":
        """Build from string values (e.g. an INI section), rejecting unknown keys."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown simulation key {key!r}")
            default = fields[key].default
            try:
                if key == "estimators":
                    kwargs[key] = raw if isinstance(raw, tuple) else str(raw)
                elif isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    kwargs[key] = int(raw)
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = str(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return cls(**kwargs)

    def as_mapping(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(v) if isinstance(v, tuple) else (repr(v) if isinstance(v, float) else str(v))
        return out


@dataclass(frozen=True)
class TruthRecord:
    """Target coefficients of the logistic analysis model."""

    beta: np.ndarray
    names: tuple[str, ...] = COEFFICIENTS
    source: str = "population"
    prevalence: float = float("nan")


def stream(seed: int, replicate: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate, k)))


# ----------------------------------------------------------------------
# data generation


def _true_scale(config: SimConfig, n: int, rng: np.random.Generator):
    """Subject-month rows of ``(subject, month, X1, X2, Y)`` on the true scale."""
    P, L = config.n_periods, config.period_len_max
    x2 = rng.standard_normal((n, P))
    if config.setting == "misspecified":
        z = rng.gamma(10.0, 1.0, size=(n, P, L))
        x1 = np.log(z) + 0.5 * x2[..., None] + 0.1 * x2[..., None] ** 2
    else:
        x1 = rng.standard_normal((n, P, L))
    k = np.arange(1, L + 1, dtype=float)
    c = config.weibull_scale_base ** (-config.weibull_shape)
    inc = c * (k ** config.weibull_shape - (k - 1) ** config.weibull_shape)
    hazard = inc * np.exp(config.gamma1 * x1 + config.gamma2 * x2[..., None])
    event = rng.random((n, P, L)) < -np.expm1(-hazard)
    first = np.where(event.any(axis=2), event.argmax(axis=2), L - 1)
    keep = np.arange(L)[None, None, :] <= first[..., None]
    # cap total follow-up at months_max
    keep &= np.cumsum(keep.reshape(n, -1), axis=1).reshape(n, P, L) <= config.months_max
    y = event & keep
    subj = np.broadcast_to(np.arange(n)[:, None, None], keep.shape)[keep]
    x2_rows = np.broadcast_to(x2[..., None], keep.shape)[keep]
    month = np.cumsum(keep.reshape(n, -1), axis=1).reshape(n, P, L)[keep]
    return subj, month, x1[keep], x2_rows, y[keep].astype(float)


def generate_cohort(config: SimConfig, seed) -> tuple[Cohort, TruthRecord]:
    """A fully observed synthetic cohort (every phase recorded for everyone).

    :func:`sample_phases` masks chart and interview values for the subjects
    not selected.  ``seed`` is an int, ``SeedSequence`` or ``Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = config.n1
    subj, month, x1, x2, y = _true_scale(config, n, rng)
    m = len(y)
    a_s, b_s = config.ystar_params
    y_star = (rng.random(m) < np.exp(a_s + b_s * y)).astype(float)
    y_tilde = (rng.random(m) < np.exp(config.ytilde_intercept + config.ytilde_slope * y)).astype(float)
    x1_star = x1 + np.sqrt(config.var_ustar) * rng.standard_normal(m)
    x1_tilde = x1 + np.sqrt(config.var_utilde) * rng.standard_normal(m)
    ids = np.array([f"s{i:05d}" for i in range(n)], dtype=object)
    everyone = np.ones(n, bool)
    blank = np.full(n, "", dtype=object)
    cohort = Cohort(
        subject_ids=ids, r1=everyone, r2=everyone, stratum_p2=blank, stratum_p3=blank,
        row_subject=subj, month=month, offset=np.ones(m),
        values={"y_star": y_star, "x1_star": x1_star, "y_tilde": y_tilde,
                "x1_tilde": x1_tilde, "y_true": y, "x1_true": x1},
        x3=x2[:, None], x3_names=("x3_1",))
    return cohort, truth_for(config)


def truth_for(config: SimConfig) -> TruthRecord:
    if config.truth == "gamma":
        return TruthRecord(beta=np.array([np.nan, config.gamma1, config.gamma2]), source="gamma")
    return population_truth(_dgp_key(config))


def _dgp_key(config: SimConfig):
    """Fields that determine the true-scale distribution (not the errors)."""
    mis = config.setting == "misspecified"
    return dataclasses.replace(
        SimConfig(), n1=1000, n2=2, n3=2, months_max=config.months_max,
        n_periods=config.n_periods, period_len_max=config.period_len_max,
        weibull_shape=config.weibull_shape, weibull_scale_base=config.weibull_scale_base,
        gamma1=config.gamma1, gamma2=config.gamma2,
        setting="misspecified" if mis else "s1", truth_subjects=config.truth_subjects)


@functools.lru_cache(maxsize=8)
def population_truth(key: SimConfig, chunk: int = 100_000) -> TruthRecord:
    """Logistic coefficients on a large complete-data population.

    Data are generated in chunks from a fixed seed and the logistic
    likelihood is maximized by Newton on accumulated sufficient pieces.
    """
    n_total = key.truth_subjects
    x1s, x2s, ys = [], [], []
    for j, start in enumerate(range(0, n_total, chunk)):
        n = min(chunk, n_total - start)
        rng = np.random.default_rng(np.random.SeedSequence(TRUTH_SEED, spawn_key=(j,)))
        _, _, x1, x2, y = _true_scale(key, n, rng)
        x1s.append(x1.astype(np.float32))
        x2s.append(x2.astype(np.float32))
        ys.append(y.astype(bool))
    beta = np.zeros(3)
    for _ in range(50):
        g = np.zeros(3)
        H = np.zeros((3, 3))
        for x1, x2, y in zip(x1s, x2s, ys):
            X = np.column_stack([np.ones(len(y)), x1, x2])
            mu = expit(X @ beta)
            g += X.T @ (y - mu)
            H += X.T @ (X * (mu * (1 - mu))[:, None])
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12:
            break
    prevalence = float(sum(y.sum() for y in ys) / sum(len(y) for y in ys))
    return TruthRecord(beta=beta, source="population", prevalence=prevalence)


# ----------------------------------------------------------------------
# sampling


def _any_by_subject(cohort: Cohort, col: np.ndarray) -> np.ndarray:
    return np.bincount(cohort.row_subject, weights=np.nan_to_num(col), minlength=cohort.n1) > 0


def _stratified_sample(rng, labels, eligible, allocation):
    chosen = np.zeros(len(labels), bool)
    for lab, k in allocation:
        idx = np.flatnonzero(eligible & (labels == lab))
        if len(idx) < k:
            warnings.warn(f"stratum {lab} has {len(idx)} subjects, {k} requested; taking all",
                          StratumExhausted, stacklevel=3)
            k = len(idx)
        chosen[rng.choice(idx, size=k, replace=False)] = True
    return chosen


def sample_phases(cohort: Cohort, config: SimConfig, seed) -> Cohort:
    """Stratified phase-2 and phase-3 samples; unselected values are masked."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    e_star = _any_by_subject(cohort, cohort.values["y_star"]).astype(int)
    lab2 = np.array([f"E*={e}" for e in e_star], dtype=object)
    everyone = np.ones(cohort.n1, bool)
    r1 = _stratified_sample(rng, lab2, everyone, [("E*=0", config.n2 // 2), ("E*=1", config.n2 // 2)])
    e_tilde = _any_by_subject(cohort, cohort.values["y_tilde"]).astype(int)
    if config.phase3_design == "s2":
        cells = [f"E*={a},E~={b}" for a in (0, 1) for b in (0, 1)]
        lab3 = np.array([f"E*={a},E~={b}" for a, b in zip(e_star, e_tilde)], dtype=object)
        base, extra = divmod(config.n3, 4)
        alloc = [(c, base + (i < extra)) for i, c in enumerate(cells)]
    else:
        lab3 = lab2.copy()
        base, extra = divmod(config.n3, 2)
        alloc = [("E*=0", base + (extra > 0)), ("E*=1", base)]
    r2 = _stratified_sample(rng, lab3, r1, alloc)
    lab3 = np.where(r1, lab3, "")
    rows1 = cohort.row_mask(r1)
    rows2 = cohort.row_mask(r2)
    values = dict(cohort.values)
    for name in list(values):
        if name.endswith("_tilde"):
            values[name] = np.where(rows1, values[name], np.nan)
        elif name.endswith("_true"):
            values[name] = np.where(rows2, values[name], np.nan)
    return dataclasses.replace(cohort, r1=r1, r2=r2, stratum_p2=lab2, stratum_p3=lab3,
                               values=values)


# ----------------------------------------------------------------------
# replicates


def _rows(rep, name, report: EstimateReport | None, truth, status):
    out = []
    for j, coef in enumerate(COEFFICIENTS):
        est = float(report.beta[j]) if report is not None else float("nan")
        se = float(report.se[j]) if report is not None else float("nan")
        out.append((rep, name, coef, est, se, float(truth.beta[j]), status))
    return out


def run_replicate(config: SimConfig, rep: int, truth: TruthRecord | None = None) -> list[tuple]:
    """Raw estimate rows for every configured estimator on one replicate."""
    truth = truth or truth_for(config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratumExhausted)
        full, _ = generate_cohort(config, stream(config.seed, rep, GEN))
        cohort = sample_phases(full, config, stream(config.seed, rep, SAMPLE))
    del full
    spec = ANALYSIS_SPEC
    wanted = set(config.estimators)
    reports: dict[str, EstimateReport] = {}
    status: dict[str, str] = {}

    def attempt(name, fn):
        try:
            reports[name] = fn()
            status[name] = "ok"
        except (TriphaseError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d: %s failed: %s", rep, name, exc)
            status[name] = type(exc).__name__

    try:
        design = from_stratified_counts(cohort)
    except TriphaseError as exc:
        return [row for name in ESTIMATORS if name in wanted
                for row in _rows(rep, name, None, truth, type(exc).__name__)]
    kw = {"distance": config.distance}
    if "ipw" in wanted:
        attempt("ipw", lambda: ipw(cohort, design, spec))
    if wanted & {"gr2", "gr3"}:
        attempt("_naive", lambda: naive_influence(cohort, spec, "star"))
    for name, fn in (("gr2", lambda: two_phase_raking(cohort, design, spec, aux=reports["_naive"], **kw)),
                     ("gr3", lambda: three_phase_raking(cohort, design, spec,
                                                        aux_p1=reports["_naive"], **kw))):
        if name in wanted:
            if "_naive" in reports:
                attempt(name, fn)
            else:
                status[name] = "upstream_" + status["_naive"]
    imputed = {}
    for mode, name, k, gr in (("two_phase", "mi2", MI2, "gr2+mi"), ("three_phase", "mi3", MI3, "gr3+mi")):
        if name not in wanted and gr not in wanted:
            continue
        ss = np.random.SeedSequence(config.seed, spawn_key=(rep, k))

        def run_mi(mode=mode, ss=ss, name=name, gr=gr):
            rep_, imp = mi_estimate(cohort, spec, config.B, mode, ss, design=design,
                                    auxiliary=gr in wanted, keep_datasets=False)
            imputed[name] = imp
            return rep_

        attempt(name, run_mi)
        if gr in wanted:
            if name in imputed:
                phases = 2 if mode == "two_phase" else 3
                attempt(gr, lambda phases=phases, name=name: raking_with_mi(
                    cohort, design, spec, imputed[name], phases=phases, **kw))
            else:
                status[gr] = "upstream_" + status[name]
    rows = []
    for name in ESTIMATORS:
        if name in wanted:
            rows.extend(_rows(rep, name, reports.get(name), truth, status[name]))
    log.info("replicate %d finished", rep)
    return rows


# ----------------------------------------------------------------------
# summaries


def raw_frame(rows) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=list(RAW_COLUMNS))
    return _sorted(df)


def _sorted(df: pd.DataFrame) -> pd.DataFrame:
    est_rank = {e: i for i, e in enumerate(ESTIMATORS)}
    coef_rank = {c: i for i, c in enumerate(COEFFICIENTS)}
    unknown = set(df["estimator"]) - set(est_rank) | set(df["coefficient"]) - set(coef_rank)
    if unknown:
        raise SchemaError(f"unknown estimator/coefficient labels {sorted(unknown)}")
    key = (df["replicate"].astype(int) * 100 + df["estimator"].map(est_rank) * 10
           + df["coefficient"].map(coef_rank))
    return df.assign(_k=key.values).sort_values("_k", kind="stable").drop(columns="_k").reset_index(drop=True)


def summarize(raw: pd.DataFrame) -> pd.DataFrame:
    """Bias, variance, MSE and squared-bias share per estimator and coefficient."""
    raw = _sorted(raw)
    out = []
    for est in ESTIMATORS:
        for coef in COEFFICIENTS:
            sub = raw[(raw["estimator"] == est) & (raw["coefficient"] == coef)]
            if sub.empty:
                continue
            ok = sub["status"] == "ok"
            err = sub.loc[ok, "estimate"].to_numpy(float) - sub.loc[ok, "truth"].to_numpy(float)
            n_ok = int(ok.sum())
            if n_ok:
                bias = float(np.mean(err))
                mse = float(np.mean(err ** 2))
                var = float(np.var(err, ddof=1)) if n_ok > 1 else float("nan")
                share = bias ** 2 / mse if mse > 0 else float("nan")
            else:
                bias = mse = var = share = float("nan")
            out.append((est, coef, n_ok, int((~ok).sum()), bias, var, mse, share))
    return pd.DataFrame(out, columns=list(METRIC_COLUMNS))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def frame_to_csv(df: pd.DataFrame) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(df.columns)
    for row in df.itertuples(index=False):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_raws(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"estimator": str, "coefficient": str, "status": str},
                         float_precision="round_trip", keep_default_na=False, na_values={"estimate": ["nan"], "se": ["nan"],
                                                          "truth": ["nan"]})
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty raw estimates file") from None
    missing = set(RAW_COLUMNS) - set(df.columns)
    if missing:
        raise SchemaError(f"{path}: missing column(s) {sorted(missing)}")
    if df.empty:
        raise SchemaError(f"{path}: no raw estimates")
    for c in ("estimate", "se", "truth"):
        df[c] = pd.to_numeric(df[c], errors="raise").astype(float)
    return df[list(RAW_COLUMNS)]


def jackknife_se(values: np.ndarray, statistic) -> float:
    """Leave-one-replicate-out standard error of ``statistic(values)``."""
    values = np.asarray(values)
    n = len(values)
    if n < 2:
        return float("nan")
    idx = np.arange(n)
    loo = np.array([statistic(values[idx != i]) for i in range(n)])
    return float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def paired_errors(raw: pd.DataFrame, estimators, coefficient: str) -> np.ndarray:
    """``(n, k)`` estimation errors on replicates where all estimators succeeded."""
    sub = raw[(raw["coefficient"] == coefficient) & raw["estimator"].isin(estimators)]
    wide = sub.pivot(index="replicate", columns="estimator", values="estimate")
    okw = sub.pivot(index="replicate", columns="estimator", values="status")
    truth = sub.groupby("replicate")["truth"].first()
    keep = (okw[list(estimators)] == "ok").all(axis=1)
    err = wide.loc[keep, list(estimators)].sub(truth[keep], axis=0)
    return err.to_numpy(float)


def mse_gap(raw: pd.DataFrame, a: str, b: str, coefficient: str = "beta1") -> tuple[float, float]:
    """``MSE(a) - MSE(b)`` over paired replicates and its jackknife SE."""
    err = paired_errors(raw, (a, b), coefficient)

    def stat(e):
        return float(np.mean(e[:, 0] ** 2) - np.mean(e[:, 1] ** 2))

    return stat(err), jackknife_se(err, stat)


def variance_reduction(raw: pd.DataFrame, a: str, b: str, coefficient: str = "beta1"
                       ) -> tuple[float, float]:
    """``1 - var(a) / var(b)`` over paired replicates and its jackknife SE."""
    err = paired_errors(raw, (a, b), coefficient)

    def stat(e):
        return float(1 - np.var(e[:, 0], ddof=1) / np.var(e[:, 1], ddof=1))

    return stat(err), jackknife_se(err, stat)


@dataclass
class MetricsTable:
    raw: pd.DataFrame
    summary: pd.DataFrame = field(init=False)

    def __post_init__(self):
        self.raw = _sorted(self.raw)
        self.summary = summarize(self.raw)

    def metrics_csv(self) -> str:
        return frame_to_csv(self.summary)

    def raw_csv(self) -> str:
        return frame_to_csv(self.raw)

    def metric(self, estimator: str, coefficient: str, name: str) -> float:
        s = self.summary
        row = s[(s["estimator"] == estimator) & (s["coefficient"] == coefficient)]
        return float(row[name].iloc[0])


def run_monte_carlo(config: SimConfig, jobs: int = 1, replicates=None) -> MetricsTable:
    """Run ``config.n_sims`` replicates (optionally in parallel) and summarize."""
    truth = truth_for(config)
    reps = range(config.n_sims) if replicates is None else replicates
    if jobs == 1:
        chunks = [run_replicate(config, r, truth) for r in reps]
    else:
        from joblib import Parallel, delayed

        chunks = Parallel(n_jobs=jobs)(delayed(run_replicate)(config, r, truth) for r in reps)
    rows = [row for chunk in chunks for row in chunk]
    return MetricsTable(raw_frame(rows))
