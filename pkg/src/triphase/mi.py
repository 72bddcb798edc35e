"""Sequential multiple imputation of true-scale values across three phases.

Stage ``p3_to_p2`` fits imputation models on fully validated subjects and
imputes true values for subjects with chart data only, using error-prone
and chart values at months ``m-1, m, m+1`` plus error-free covariates.
Stage ``p2_to_p1`` refits on the completed phase-2 data with error-prone
predictors only and imputes the remaining subjects.  Stage ``p3_to_p1``
(two-phase mode) ignores chart data and imputes directly from phase-3.

Within a stage variables are imputed in the order ``y -> x1 -> x2``; the
model for ``x1`` conditions on the completed ``y`` at ``m-1, m, m+1`` and
the model for ``x2`` additionally on completed ``x1``.  Neighbour months
outside follow-up enter as zeros, with indicators ``has_prev`` and
``has_next`` in every model.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from . import glm
from .data import Cohort, export
from .design import ThreePhaseDesign
from .errors import InvalidValue, SparseCategory
from .estimators import EstimateReport, fit_subjects, phase2_influence
from .terms import expand

log = logging.getLogger(__name__)

STAGES = ("p3_to_p2", "p2_to_p1", "p3_to_p1")
MODES = ("two_phase", "three_phase")
RIDGE = 1e-6
OBSERVED, STAGE1, STAGE2 = 0, 1, 2


@dataclass
class VariableModel:
    """Fitted imputation model for one variable."""

    var: str
    kind: str  # binary, continuous or categorical
    names: tuple[str, ...]
    fit: glm.FitResult | glm.LinearFit
    n_classes: int | None = None
    extreme_fraction: float = 0.0
    dropped: tuple[str, ...] = ()


@dataclass
class ImputationModelSet:
    stage: str
    models: dict[str, VariableModel]

    def predictor_names(self) -> set[str]:
        return {n for m in self.models.values() for n in m.names}


@dataclass
class CompletedData:
    """True-scale values for every row; ``provenance`` flags each row.

    ``aux_p1`` and ``aux_p2`` hold model-imputed values for every subject
    (phase-2 subjects only for ``aux_p2``) when auxiliaries were requested.
    """

    subject_ids: np.ndarray
    values: dict[str, np.ndarray]
    provenance: np.ndarray
    aux_p1: dict[str, np.ndarray] | None = None
    aux_p2: dict[str, np.ndarray] | None = None
    stage2: "ImputationModelSet | None" = field(default=None, repr=False)


@dataclass
class ImputedCohort:
    B: int
    mode: str
    estimates: np.ndarray
    vcovs: np.ndarray
    names: tuple[str, ...]
    provenance: np.ndarray
    datasets: list[CompletedData] = field(default_factory=list)
    aux_p1: np.ndarray | None = None
    aux_p2: np.ndarray | None = None
    stage1: ImputationModelSet | None = None


# ----------------------------------------------------------------------
# predictors


def _shift(mat: np.ndarray, cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    prev = np.zeros_like(mat)
    nxt = np.zeros_like(mat)
    prev[1:] = mat[:-1]
    nxt[:-1] = mat[1:]
    prev[~cohort.has_prev] = 0.0
    nxt[~cohort.has_next] = 0.0
    return prev, nxt


def _neighbourhood(cohort: Cohort, var: str, phase: str, values=None):
    mat, names = expand(cohort, var, phase, values)
    prev, nxt = _shift(mat, cohort)
    label = var if values is not None else f"{var}_{phase}"
    names = [n.replace(var, label, 1) for n in names]
    return ([prev, mat, nxt],
            [f"{n}[m-1]" for n in names] + [f"{n}[m]" for n in names]
            + [f"{n}[m+1]" for n in names])


def base_predictors(cohort: Cohort, stage: str) -> tuple[np.ndarray, list[str]]:
    """Predictors that do not depend on imputed values."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    blocks = [np.ones((cohort.n_rows, 1)), cohort.has_prev[:, None].astype(float),
              cohort.has_next[:, None].astype(float)]
    names = ["(Intercept)", "has_prev", "has_next"]
    phases = ("star", "tilde") if stage == "p3_to_p2" else ("star",)
    for phase in phases:
        for var in cohort.variables:
            mats, nm = _neighbourhood(cohort, var, phase)
            blocks.extend(mats)
            names.extend(nm)
    blocks.append(cohort.x3)
    names.extend(cohort.x3_names)
    return np.column_stack(blocks), names


def _cascade(cohort: Cohort, var: str, completed: Mapping[str, np.ndarray]):
    """Completed earlier variables at ``m-1, m, m+1``."""
    order = cohort.variables
    blocks, names = [], []
    for earlier in order[:order.index(var)]:
        mats, nm = _neighbourhood(cohort, earlier, "true", {earlier: completed[earlier]})
        blocks.extend(mats)
        names.extend(nm)
    if not blocks:
        return np.zeros((cohort.n_rows, 0)), []
    return np.column_stack(blocks), names


def _design(cohort, base, var, completed, rows):
    X0, n0 = base
    Xc, nc = _cascade(cohort, var, completed)
    X = np.column_stack([X0[rows], Xc[rows]]) if Xc.shape[1] else X0[rows]
    return X, tuple(n0 + nc)


# ----------------------------------------------------------------------
# fitting


def _fit_rows(cohort: Cohort, stage: str) -> np.ndarray:
    subj = cohort.r if stage in ("p3_to_p2", "p3_to_p1") else cohort.r1
    return cohort.row_mask(subj)


def target_rows(cohort: Cohort, stage: str) -> np.ndarray:
    """Rows whose true values a stage imputes."""
    if stage == "p3_to_p2":
        subj = cohort.r1 & ~cohort.r2
    elif stage == "p2_to_p1":
        subj = ~cohort.r1
    else:
        subj = ~cohort.r
    return cohort.row_mask(subj)


def _domain_rows(cohort: Cohort, stage: str) -> np.ndarray:
    """Rows a stage's models can predict for (used for auxiliary datasets)."""
    if stage == "p3_to_p2":
        return cohort.row_mask(cohort.r1)
    return np.ones(cohort.n_rows, bool)


def fit_stage(stage: str, cohort: Cohort, completed: Mapping[str, np.ndarray] | None = None,
              base: tuple | None = None, start: ImputationModelSet | None = None
              ) -> ImputationModelSet:
    """Fit the ``y``, ``x1`` (and ``x2``) imputation models of one stage.

    ``completed`` holds true-scale values for at least the fitting rows; by
    default the observed phase-3 values.  Stage ``p2_to_p1`` needs the
    completed phase-2 values.  ``start`` supplies starting values from an
    earlier fit of the same stage.
    """
    if completed is None:
        if stage == "p2_to_p1":
            raise ValueError("stage p2_to_p1 is fitted on completed phase-2 values")
        completed = {v: cohort.values[f"{v}_true"] for v in cohort.variables}
    base = base or base_predictors(cohort, stage)
    rows = _fit_rows(cohort, stage)
    if not rows.any():
        raise InvalidValue(f"stage {stage}: no subjects to fit the imputation models on")
    models = {}
    for var in cohort.variables:
        X, names = _design(cohort, base, var, completed, rows)
        y = completed[var][rows]
        if np.isnan(y).any():
            raise InvalidValue(f"stage {stage}: {var} missing on fitting rows")
        kind = cohort.kind(var)
        dropped = _aliased(X, names, stage, var) if start is None else start.models[var].dropped
        keep = np.array([n not in dropped for n in names])
        full_names, X, names = names, X[:, keep], tuple(n for n, k in zip(names, keep) if k)
        b0 = None
        if start is not None and kind != "continuous":
            b0 = _restrict(start.models[var].fit.beta, keep, start.models[var].n_classes)
        if kind == "binary":
            res = glm.fit("binomial", X, y, names=names, ridge=RIDGE, start=b0,
                          check_rank=False)
            p = expit(X @ res.beta)
            extreme = float(np.mean((p < glm.SEPARATION_EPS) | (p > 1 - glm.SEPARATION_EPS)))
            if extreme and start is None:
                log.info("stage %s: %s model separates %.1f%% of rows; ridge keeps draws finite",
                         stage, var, 100 * extreme)
            model = VariableModel(var, kind, names, res, extreme_fraction=extreme)
        elif kind == "categorical":
            K = len(cohort.categories[var])
            absent = sorted(set(range(K)) - set(np.unique(y).astype(int)))
            if absent:
                levels = [cohort.categories[var][k] for k in absent]
                raise SparseCategory(f"stage {stage}: level(s) {levels} of {var} absent from fitting data")
            res = glm.fit("multinomial", X, y, names=names, ridge=RIDGE, n_classes=K, start=b0,
                          check_rank=False)
            model = VariableModel(var, kind, names, res, n_classes=K)
        else:
            res = glm.fit_linear(X, y, names=names, check_rank=False)
            model = VariableModel(var, kind, names, res)
        models[var] = _embed(model, keep, full_names, dropped)
    if stage != "p3_to_p2":
        phantom = [n for m in models.values() for n in m.names if "_tilde" in n]
        assert not phantom, f"stage {stage} references chart values {phantom}"
    return ImputationModelSet(stage, models)


def _aliased(X, names, stage, var) -> tuple[str, ...]:
    """Columns to drop so the design has full rank.

    Exact aliasing occurs when a phase records the truth without error
    (e.g. completed ``y`` lags equal ``y*`` lags); the aliased columns get a
    zero coefficient.
    """
    try:
        glm.check_rank_or_raise(X, names)
    except glm.RankDeficient as exc:
        if len(exc.aliased) >= X.shape[1]:
            raise
        log.info("stage %s: %s model drops aliased predictor(s) %s", stage, var,
                 list(exc.aliased))
        return tuple(exc.aliased)
    return ()


def _restrict(beta, keep, n_classes):
    k = 1 if n_classes is None else n_classes - 1
    return np.asarray(beta).reshape(k, -1)[:, keep].ravel()


def _embed(model: VariableModel, keep: np.ndarray, names, dropped) -> VariableModel:
    """Re-express a fit on the kept columns over the full predictor list."""
    if keep.all():
        return model
    p = len(keep)
    k = 1 if model.n_classes is None else model.n_classes - 1
    idx = (np.arange(k)[:, None] * p + np.flatnonzero(keep)[None, :]).ravel()

    def vec(b):
        out = np.zeros(k * p)
        out[idx] = b
        return out

    def mat(m):
        out = np.zeros((k * p, k * p))
        out[np.ix_(idx, idx)] = m
        return out

    f = model.fit
    if isinstance(f, glm.LinearFit):
        fit = glm.LinearFit(beta=vec(f.beta), sigma2=f.sigma2, df=f.df,
                            xtx_inv=mat(f.xtx_inv), names=tuple(names))
    else:
        fit = dataclasses.replace(f, beta=vec(f.beta), info=mat(f.info),
                                  vcov_model=mat(f.vcov_model), names=tuple(names),
                                  cluster_scores=None, cluster_infl=None, vcov_sandwich=None)
    return dataclasses.replace(model, names=tuple(names), fit=fit, dropped=tuple(dropped))


# ----------------------------------------------------------------------
# imputation


def draw_model_parameters(models: ImputationModelSet, rng: np.random.Generator,
                          draw: bool = True) -> dict:
    """One parameter draw per model: ``beta ~ N(beta_hat, V)``; for the normal
    model ``sigma2 ~ df s^2 / chi2_df`` first and ``beta | sigma2``."""
    out = {}
    for var, model in models.models.items():
        fit = model.fit
        if model.kind == "continuous":
            if not draw:
                out[var] = (fit.beta, fit.sigma2)
                continue
            sigma2 = fit.df * fit.sigma2 / rng.chisquare(fit.df)
            out[var] = (rng.multivariate_normal(fit.beta, sigma2 * fit.xtx_inv, method="eigh"), sigma2)
        elif draw:
            out[var] = (rng.multivariate_normal(fit.beta, fit.vcov_model, method="eigh"), None)
        else:
            out[var] = (fit.beta, None)
    return out


def _linear_predictor(cohort, base, var, completed, rows, beta):
    """``X beta`` on ``rows`` without materializing ``X[rows]``."""
    X0, n0 = base
    p0 = len(n0)
    Xc, nc = _cascade(cohort, var, completed)
    B = np.asarray(beta, float)
    B = B.reshape(-1, p0 + len(nc))
    if rows.all():
        eta = X0 @ B[:, :p0].T
        if nc:
            eta += Xc @ B[:, p0:].T
        return eta, tuple(n0 + nc)
    eta = (X0 @ B[:, :p0].T)[rows]
    if nc:
        eta += Xc[rows] @ B[:, p0:].T
    return eta, tuple(n0 + nc)


def _impute_var(model: VariableModel, params, eta: np.ndarray, rng) -> np.ndarray:
    beta, sigma2 = params
    n = len(eta)
    if model.kind == "binary":
        return (rng.random(n) < expit(eta[:, 0])).astype(float)
    if model.kind == "continuous":
        return eta[:, 0] + np.sqrt(sigma2) * rng.standard_normal(n)
    K = model.n_classes
    eta = np.column_stack([np.zeros(n), eta])
    P = np.exp(eta - eta.max(axis=1, keepdims=True))
    cum = np.cumsum(P / P.sum(axis=1, keepdims=True), axis=1)
    return np.minimum((cum < rng.random(n)[:, None]).sum(axis=1), K - 1).astype(float)


def impute_stage(models: ImputationModelSet, cohort: Cohort, completed: dict,
                 rng: np.random.Generator, *, params: dict | None = None,
                 rows: np.ndarray | None = None, draw: bool = True,
                 base: tuple | None = None) -> None:
    """Fill ``rows`` (default: the stage's target rows) of ``completed`` in place."""
    rows = target_rows(cohort, models.stage) if rows is None else rows
    if not rows.any():
        return
    params = params if params is not None else draw_model_parameters(models, rng, draw)
    base = base or base_predictors(cohort, models.stage)
    for var in cohort.variables:
        model = models.models[var]
        eta, names = _linear_predictor(cohort, base, var, completed, rows, params[var][0])
        if names != model.names:
            raise InvalidValue(f"predictors for {var} differ from the fitted model")
        completed[var][rows] = _impute_var(model, params[var], eta, rng)


def observed_values(cohort: Cohort) -> tuple[dict, np.ndarray]:
    completed = {v: cohort.values[f"{v}_true"].copy() for v in cohort.variables}
    prov = np.full(cohort.n_rows, OBSERVED, dtype=np.int8)
    return completed, prov


def impute_once(models: ImputationModelSet, cohort: Cohort, seed, *,
                draw_parameters: bool = True, bases: dict | None = None,
                auxiliary: bool = False, stage2_start: ImputationModelSet | None = None
                ) -> CompletedData:
    """One completed dataset.

    ``models`` is the first-stage model set: ``p3_to_p2`` for three-phase
    imputation (stage 2 is refit on the completed phase-2 data), or
    ``p3_to_p1`` for two-phase imputation.  Phase-3 values are never
    overwritten.

    With ``auxiliary`` the same parameter draws also impute every subject,
    validated or not: ``aux_p1`` from the models that use error-prone data
    only and, for three-phase imputation, ``aux_p2`` for phase-2 subjects
    from the models that also use chart data.  These model-based values feed
    the influence-function auxiliaries of raking.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bases = bases if bases is not None else {}
    completed, prov = observed_values(cohort)
    stage = models.stage
    if stage == "p2_to_p1":
        raise ValueError("impute_once starts from a p3_to_p2 or p3_to_p1 model set")
    base = bases.get(stage) or base_predictors(cohort, stage)
    theta = draw_model_parameters(models, rng, draw_parameters)
    impute_stage(models, cohort, completed, rng, params=theta, base=base)
    prov[target_rows(cohort, stage)] = STAGE1
    aux_p1 = aux_p2 = None
    if stage == "p3_to_p2":
        if auxiliary:
            aux_p2 = {v: np.full(cohort.n_rows, np.nan) for v in cohort.variables}
            impute_stage(models, cohort, aux_p2, rng, params=theta,
                         rows=_domain_rows(cohort, stage), base=base)
        base2 = bases.get("p2_to_p1") or base_predictors(cohort, "p2_to_p1")
        rows2 = target_rows(cohort, "p2_to_p1")
        stage2 = None
        if rows2.any() or auxiliary:
            stage2 = fit_stage("p2_to_p1", cohort, completed, base2, start=stage2_start)
            theta2 = draw_model_parameters(stage2, rng, draw_parameters)
            impute_stage(stage2, cohort, completed, rng, params=theta2, base=base2)
            prov[rows2] = STAGE2
            if auxiliary:
                aux_p1 = {v: np.full(cohort.n_rows, np.nan) for v in cohort.variables}
                impute_stage(stage2, cohort, aux_p1, rng, params=theta2,
                             rows=_domain_rows(cohort, "p2_to_p1"), base=base2)
        out = CompletedData(cohort.subject_ids, completed, prov, aux_p1, aux_p2)
        out.stage2 = stage2
        return out
    if auxiliary:
        aux_p1 = {v: np.full(cohort.n_rows, np.nan) for v in cohort.variables}
        impute_stage(models, cohort, aux_p1, rng, params=theta,
                     rows=_domain_rows(cohort, stage), base=base)
    return CompletedData(cohort.subject_ids, completed, prov, aux_p1, aux_p2)


def _child(seed, b: int) -> np.random.SeedSequence:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (b,))


def mi_estimate(cohort: Cohort, spec: glm.ModelSpec, B: int, mode: str = "three_phase",
                seed=0, *, design: ThreePhaseDesign | None = None, auxiliary: bool = False,
                keep_datasets: bool = True, draw_parameters: bool = True
                ) -> tuple[EstimateReport, ImputedCohort]:
    """Multiply impute, fit ``spec`` on each completed dataset and pool.

    The pooled covariance follows Rubin's rules with the cluster-robust
    covariance of each completed-data fit as the within-imputation part.
    With ``auxiliary`` the influence functions used by raking with imputed
    auxiliaries are averaged along the way (three-phase mode also needs
    ``design`` for the phase-2 auxiliaries).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if B < 2:
        raise InvalidValue("multiple imputation needs B >= 2")
    if auxiliary and mode == "three_phase" and design is None:
        raise ValueError("three-phase auxiliaries need the sampling design")
    stage = "p3_to_p2" if mode == "three_phase" else "p3_to_p1"
    bases = {stage: base_predictors(cohort, stage)}
    if mode == "three_phase":
        bases["p2_to_p1"] = base_predictors(cohort, "p2_to_p1")
    models = fit_stage(stage, cohort, base=bases[stage])
    everyone = np.ones(cohort.n1, bool)
    betas, vcovs, datasets = [], [], []
    a1 = a2 = None
    names = ()
    prov = None
    start = aux_start = stage2 = None
    for b in range(B):
        rng = np.random.default_rng(_child(seed, b))
        ds = impute_once(models, cohort, rng, draw_parameters=draw_parameters, bases=bases,
                         auxiliary=auxiliary, stage2_start=stage2)
        stage2 = getattr(ds, "stage2", None) or stage2
        res, _ = fit_subjects(cohort, spec, "true", everyone, values=ds.values, start=start)
        start = res.beta
        names = res.names
        betas.append(res.beta)
        vcovs.append(res.vcov_sandwich)
        if auxiliary:
            r1, _ = fit_subjects(cohort, spec, "true", everyone, values=ds.aux_p1,
                                 start=aux_start)
            aux_start = r1.beta
            inf1 = np.full((cohort.n1, len(r1.beta)), np.nan)
            inf1[r1.cluster_labels] = r1.cluster_infl
            a1 = inf1 if a1 is None else a1 + inf1
            if ds.aux_p2 is not None:
                inf2 = phase2_influence(cohort, design, spec, "true", ds.aux_p2)
                a2 = inf2 if a2 is None else a2 + inf2
        prov = ds.provenance
        if keep_datasets:
            datasets.append(ds)
    betas = np.array(betas)
    vcovs = np.array(vcovs)
    W = vcovs.mean(axis=0)
    Bt = np.cov(betas, rowvar=False, ddof=1).reshape(W.shape)
    T = W + (1 + 1 / B) * Bt
    imputed = ImputedCohort(
        B=B, mode=mode, estimates=betas, vcovs=vcovs, names=names, provenance=prov,
        datasets=datasets, aux_p1=None if a1 is None else a1 / B,
        aux_p2=None if a2 is None else a2 / B, stage1=models)
    report = EstimateReport(
        method="mi3" if mode == "three_phase" else "mi2", names=names,
        beta=betas.mean(axis=0), vcov=(T + T.T) / 2, family=spec.family,
        diagnostics={"converged": True, "B": B, "mode": mode,
                     "within_var": np.diag(W).tolist(), "between_var": np.diag(Bt).tolist(),
                     "separated_fraction": {v: m.extreme_fraction for v, m in models.models.items()}})
    return report, imputed


def export_completed(cohort: Cohort, completed: CompletedData, path) -> None:
    """Write the cohort with ``<var>_imp`` columns and a provenance column."""
    extra = {}
    for var in cohort.variables:
        col = completed.values[var]
        extra[f"{var}_imp"] = np.array([repr(float(v)) if v != int(v) else str(int(v)) for v in col])
    extra["provenance"] = completed.provenance.astype(int)
    export(cohort, path, extra_columns=extra)
