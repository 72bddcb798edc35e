"""Design-based estimators for three-phase validation data.

All estimators solve a weighted score equation on the fully validated
subjects (``R = 1``) and differ only in the weights:

* :func:`ipw` uses the design weights ``d = d1 d2``;
* :func:`two_phase_raking` calibrates ``d`` to phase-1 totals of the
  influence functions of a naive fit on error-prone data;
* :func:`three_phase_raking` calibrates phase by phase
  (:func:`~triphase.calibration.three_phase_calibrate`);
* :func:`raking_with_mi` uses influence functions averaged over multiply
  imputed datasets as the auxiliaries.

Influence functions are aggregated to subjects, the sampling units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import glm
from .calibration import CalibratedWeights, Distance, calibrate, three_phase_calibrate
from .data import Cohort
from .design import ThreePhaseDesign
from .errors import ImputationSetMismatch, InvalidValue
from .terms import model_matrix

Z95 = 1.959963984540054
VARIANCES = ("linearized", "sandwich")


@dataclass
class EstimateReport:
    """Point estimate, standard errors and diagnostics for one estimator."""

    method: str
    names: tuple[str, ...]
    beta: np.ndarray
    vcov: np.ndarray
    family: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def ci95(self) -> np.ndarray:
        """``(p, 2)`` array of ``beta -/+ 1.96 se``."""
        return np.column_stack([self.beta - Z95 * self.se, self.beta + Z95 * self.se])

    @property
    def irr(self) -> np.ndarray | None:
        """Incidence rate ratios ``exp(beta)`` for Poisson-log models."""
        return np.exp(self.beta) if self.family == "poisson" else None

    def records(self) -> list[dict]:
        ci = self.ci95
        irr = self.irr
        out = []
        for j, name in enumerate(self.names):
            out.append({
                "estimator": self.method, "term": name,
                "beta": float(self.beta[j]), "se": float(self.se[j]),
                "ci_lo": float(ci[j, 0]), "ci_hi": float(ci[j, 1]),
                "irr": float(irr[j]) if irr is not None else float("nan"),
            })
        return out

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "records": self.records(),
                           "diagnostics": self.diagnostics}, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# ----------------------------------------------------------------------
# shared pieces


def _full(labels: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n, rows.shape[1]), np.nan)
    out[labels] = rows
    return out


def fit_subjects(cohort: Cohort, spec: glm.ModelSpec, phase: str, subject_mask,
                 subject_weights=None, values: Mapping[str, np.ndarray] | None = None,
                 allow_negative: bool = False, start=None) -> tuple[glm.FitResult, tuple]:
    """Fit ``spec`` on the rows of the selected subjects, clustered by subject.

    Returns the fit and ``(X, y, offset, clusters)`` for later use.
    """
    mask = np.asarray(subject_mask, bool)
    rows = cohort.row_mask(mask)
    X, y, off, names = model_matrix(cohort, spec, phase, rows, values)
    clusters = cohort.row_subject[rows]
    w = None
    if subject_weights is not None:
        w = np.asarray(subject_weights, float)[clusters]
    res = glm.fit(spec, X, y, w, off, clusters, names=names, allow_negative=allow_negative,
                  start=start, check_rank=start is None)
    return res, (X, y, off, clusters)


def naive_influence(cohort: Cohort, spec: glm.ModelSpec, phase: str = "star",
                    values: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """``(n1, p)`` influence functions of an unweighted fit on every subject."""
    res, _ = fit_subjects(cohort, spec, phase, np.ones(cohort.n1, bool), values=values)
    return _full(res.cluster_labels, res.cluster_infl, cohort.n1)


def phase2_influence(cohort: Cohort, design: ThreePhaseDesign, spec: glm.ModelSpec,
                     phase: str = "tilde",
                     values: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Influence functions of the ``d1``-weighted fit on phase-2 subjects.

    The bread comes from the weighted fit; the per-subject score is
    unweighted.  Rows for subjects outside phase 2 are NaN.
    """
    res, (X, y, off, cl) = fit_subjects(cohort, spec, phase, design.r1, design.d1, values)
    labels, infl = glm.influence(res, X, y, None, off, cl)
    return _full(labels, infl, cohort.n1)


def _with_intercept(aux) -> np.ndarray:
    A = np.asarray(aux, float)
    if A.ndim == 1:
        A = A[:, None]
    return np.column_stack([np.ones(len(A)), A])


def _min_validated(cohort: Cohort, mask: np.ndarray, p: int) -> None:
    n = int(np.count_nonzero(mask))
    if n < p + 1:
        raise InvalidValue(f"{n} fully validated subjects; at least {p + 1} are needed")


def _weighted_residuals(U: np.ndarray, A: np.ndarray, w: np.ndarray) -> np.ndarray:
    sw = np.sqrt(w)[:, None]
    coef = np.linalg.lstsq(A * sw, U * sw, rcond=None)[0]
    return U - A @ coef


def _calibrated_vcov(res: glm.FitResult, U: np.ndarray, w: np.ndarray,
                     parts: Sequence[tuple[np.ndarray, np.ndarray]], variance: str) -> np.ndarray:
    """Covariance of a calibrated weighted-score estimator.

    ``U`` holds unweighted subject scores on the validated subjects and
    ``w`` their analysis weights.  ``"sandwich"`` uses the meat
    ``sum (w U)(w U)^t``.  ``"linearized"`` splits it by phase,
    ``sum w U U^t + sum_k sum c_k w e_k e_k^t`` with ``e_k`` the residual of
    ``U`` regressed on the phase-``k`` auxiliaries and ``c_k`` the phase's
    excess weight; without calibration it equals the sandwich meat.
    """
    if variance == "sandwich":
        wU = U * w[:, None]
        meat = wU.T @ wU
    elif variance == "linearized":
        meat = (U * w[:, None]).T @ U
        for coef, A in parts:
            e = _weighted_residuals(U, A, w)
            meat += (e * (w * coef)[:, None]).T @ e
    else:
        raise ValueError(f"variance must be one of {VARIANCES}")
    return glm.sandwich(res.info, meat=(meat + meat.T) / 2)


def _weighted_fit(cohort, spec, mask, weights):
    res, (X, y, off, cl) = fit_subjects(cohort, spec, "true", mask, weights, allow_negative=True)
    idx, U = glm.cluster_scores(res, X, y, None, off, cl)
    return res, idx, U


def _calibration_diagnostics(cw: CalibratedWeights) -> dict:
    lo, hi = cw.g_range
    return {"residual": cw.residual, "iterations": cw.iterations,
            "g_min": lo, "g_max": hi, "distance": cw.distance.value}


# ----------------------------------------------------------------------
# estimators


def ipw(cohort: Cohort, design: ThreePhaseDesign, spec: glm.ModelSpec) -> EstimateReport:
    """Inverse-probability-weighted fit on the validated subjects."""
    mask = design.r
    d = np.where(mask, design.d, 0.0)
    res, _ = fit_subjects(cohort, spec, "true", mask, d)
    _min_validated(cohort, mask, len(res.beta))
    return EstimateReport(
        method="ipw", names=res.names, beta=res.beta, vcov=res.vcov_sandwich,
        family=res.family,
        diagnostics={"converged": True, "iterations": res.iterations, "n3": int(mask.sum())})


def two_phase_raking(cohort: Cohort, design: ThreePhaseDesign, spec: glm.ModelSpec, *,
                     aux=None, distance: Distance | str = Distance.POISSON_DEVIANCE,
                     variance: str = "linearized", method: str = "gr2") -> EstimateReport:
    """Calibrate ``d`` on the validated subjects to phase-1 auxiliary totals.

    ``aux`` defaults to influence functions of the naive fit on phase-1
    (error-prone) data; an intercept column is always added.
    """
    if aux is None:
        aux = naive_influence(cohort, spec, "star")
    A = _with_intercept(aux)
    mask = design.r
    cw = calibrate(np.where(mask, design.d, 1.0), mask, A, A.sum(axis=0), distance)
    res, idx, U = _weighted_fit(cohort, spec, mask, cw.w)
    _min_validated(cohort, mask, len(res.beta))
    w = cw.w[idx]
    vcov = _calibrated_vcov(res, U, w, [(w - 1.0, A[idx])], variance)
    return EstimateReport(
        method=method, names=res.names, beta=res.beta, vcov=vcov, family=res.family,
        diagnostics={"converged": True, "iterations": res.iterations, "n3": int(mask.sum()),
                     "variance": variance, "calibration": [_calibration_diagnostics(cw)]})


def three_phase_raking(cohort: Cohort, design: ThreePhaseDesign, spec: glm.ModelSpec, *,
                       aux_p1=None, aux_p2=None,
                       distance: Distance | str = Distance.POISSON_DEVIANCE,
                       variance: str = "linearized", phase2_target: str = "unweighted",
                       method: str = "gr3") -> EstimateReport:
    """Calibrate phase-2 weights to ``a*`` and phase-3 weights to ``a~``.

    ``a*`` defaults to influence functions of the naive phase-1 fit and
    ``a~`` to those of the ``d1``-weighted fit on chart (phase-2) data.
    """
    if aux_p1 is None:
        aux_p1 = naive_influence(cohort, spec, "star")
    if aux_p2 is None:
        aux_p2 = phase2_influence(cohort, design, spec, "tilde")
    A1 = _with_intercept(aux_p1)
    A2 = _with_intercept(aux_p2)
    w1, w2 = three_phase_calibrate(design, A1, A2, distance, phase2_target=phase2_target)
    mask = design.r
    w = w1.w * w2.w
    res, idx, U = _weighted_fit(cohort, spec, mask, w)
    _min_validated(cohort, mask, len(res.beta))
    ws, w1s, w2s = w[idx], w1.w[idx], w2.w[idx]
    parts = [(w1s - 1.0, A1[idx]), (w1s * (w2s - 1.0), A2[idx])]
    vcov = _calibrated_vcov(res, U, ws, parts, variance)
    return EstimateReport(
        method=method, names=res.names, beta=res.beta, vcov=vcov, family=res.family,
        diagnostics={"converged": True, "iterations": res.iterations, "n3": int(mask.sum()),
                     "variance": variance, "phase2_target": phase2_target,
                     "calibration": [_calibration_diagnostics(w1), _calibration_diagnostics(w2)]})


def imputed_auxiliaries(cohort: Cohort, design: ThreePhaseDesign | None, spec: glm.ModelSpec,
                        datasets: Sequence) -> tuple[np.ndarray, np.ndarray | None]:
    """Average influence functions over imputed datasets.

    Each dataset exposes ``subject_ids`` and model-imputed true-scale columns
    ``aux_p1`` (every row) and, for three-phase raking, ``aux_p2`` (phase-2
    rows).  Returns ``(a*, a~)``; ``a~`` is None without a design.
    """
    if len(datasets) == 0:
        raise ImputationSetMismatch("no completed datasets supplied")
    a1 = a2 = None
    for b, ds in enumerate(datasets):
        if not np.array_equal(np.asarray(ds.subject_ids).astype(str),
                              cohort.subject_ids.astype(str)):
            raise ImputationSetMismatch(f"completed dataset {b} covers a different subject set")
        if ds.aux_p1 is None or (design is not None and ds.aux_p2 is None):
            raise ImputationSetMismatch(f"completed dataset {b} lacks imputed auxiliary values")
        inf1 = naive_influence(cohort, spec, "true", ds.aux_p1)
        a1 = inf1 if a1 is None else a1 + inf1
        if design is not None:
            inf2 = phase2_influence(cohort, design, spec, "true", ds.aux_p2)
            a2 = inf2 if a2 is None else a2 + inf2
    B = len(datasets)
    return a1 / B, (a2 / B if a2 is not None else None)


def raking_with_mi(cohort: Cohort, design: ThreePhaseDesign, spec: glm.ModelSpec,
                   imputations, *, phases: int = 3,
                   distance: Distance | str = Distance.POISSON_DEVIANCE,
                   variance: str = "linearized", phase2_target: str = "unweighted"
                   ) -> EstimateReport:
    """Raking with influence functions averaged over ``B`` imputations.

    ``imputations`` is an :class:`~triphase.mi.ImputedCohort`.  If it keeps
    its completed datasets the averages are recomputed from them; otherwise
    the averages accumulated during imputation are used.
    """
    B = imputations.B
    if B < 2:
        raise InvalidValue("raking with imputed auxiliaries needs B >= 2")
    if imputations.datasets:
        if len(imputations.datasets) != B:
            raise ImputationSetMismatch(f"expected {B} datasets, got {len(imputations.datasets)}")
        a1, a2 = imputed_auxiliaries(cohort, design if phases == 3 else None, spec,
                                     imputations.datasets)
    else:
        a1, a2 = imputations.aux_p1, imputations.aux_p2
        if a1 is None or (phases == 3 and a2 is None):
            raise ImputationSetMismatch("imputations carry neither datasets nor averaged auxiliaries")
    if len(a1) != cohort.n1:
        raise ImputationSetMismatch("imputed auxiliaries do not match the cohort's subjects")
    if phases == 2:
        rep = two_phase_raking(cohort, design, spec, aux=a1, distance=distance,
                               variance=variance, method="gr2+mi")
    elif phases == 3:
        rep = three_phase_raking(cohort, design, spec, aux_p1=a1, aux_p2=a2, distance=distance,
                                 variance=variance, phase2_target=phase2_target, method="gr3+mi")
    else:
        raise ValueError("phases must be 2 or 3")
    rep.diagnostics["B"] = B
    return rep
