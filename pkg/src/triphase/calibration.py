"""Calibration of design weights to known auxiliary totals.

Given design weights ``d`` on a subsample (``R = 1``) and auxiliary vectors
``a_i``, find ``w_i = g_i d_i`` closest to ``d`` in a distance ``D(w, d)``
such that ``sum_i R_i w_i a_i`` equals the target totals.

* chi-square, ``D = (w - d)^2 / 2d``: ``g = 1 - lambda' a`` in closed form;
* Poisson deviance (raking), ``D = w log(w/d) + d - w``: ``g = exp(-lambda' a)``,
  solved by damped Newton on the convex dual.  Weights stay positive.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .design import ThreePhaseDesign
from .errors import CollinearAuxiliaries, NegativeWeightWarning, NoFeasibleWeights


class Distance(str, enum.Enum):
    CHI_SQUARE = "chi_square"
    POISSON_DEVIANCE = "poisson_deviance"


def distance_value(kind: Distance | str, w, d) -> np.ndarray:
    kind = Distance(kind)
    w = np.asarray(w, float)
    d = np.asarray(d, float)
    if kind is Distance.CHI_SQUARE:
        return (w - d) ** 2 / (2 * d)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w > 0, w * (np.log(w) - np.log(d)), 0.0) + (d - w)


@dataclass(frozen=True, eq=False)
class CalibratedWeights:
    """Calibration result over the full index set.

    ``g`` and ``w`` are zero outside the calibrated subsample.  ``residual``
    is the largest constraint violation relative to the column scale
    ``sum_R d |a_j|``.
    """

    d: np.ndarray
    g: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    residual: float
    iterations: int
    distance: Distance
    mask: np.ndarray

    @property
    def g_range(self) -> tuple[float, float]:
        g = self.g[self.mask]
        return float(g.min()), float(g.max())


def _check_aux(A: np.ndarray, d: np.ndarray) -> None:
    if A.ndim != 2 or A.shape[1] == 0:
        raise CollinearAuxiliaries("auxiliary matrix has no columns")
    if not np.all(np.isfinite(A)):
        raise CollinearAuxiliaries("auxiliary values must be finite on the calibrated subsample")
    if A.shape[0] < A.shape[1]:
        raise CollinearAuxiliaries(
            f"{A.shape[0]} sampled units cannot calibrate {A.shape[1]} auxiliaries")
    s = np.linalg.svd(A * np.sqrt(d)[:, None], compute_uv=False)
    if s[0] == 0 or s[-1] <= 1e-10 * s[0]:
        raise CollinearAuxiliaries(
            f"auxiliary columns are collinear on the subsample (condition {s[0] / max(s[-1], 1e-300):.3g})")


def calibrate(d, R, aux, totals, distance: Distance | str = Distance.POISSON_DEVIANCE,
              *, tol: float = 1e-10, max_iter: int = 50) -> CalibratedWeights:
    """Calibrate ``d`` over ``R = 1`` so that ``sum R w aux = totals``.

    Rows with ``R = 0`` are ignored (their ``d`` and ``aux`` may be NaN).
    """
    distance = Distance(distance)
    d = np.asarray(d, float)
    R = np.asarray(R, bool)
    A_full = np.asarray(aux, float)
    if A_full.ndim == 1:
        A_full = A_full[:, None]
    T = np.asarray(totals, float).ravel()
    if A_full.shape[0] != len(d) or len(R) != len(d):
        raise ValueError("d, R and aux must have the same number of rows")
    if A_full.shape[1] != len(T):
        raise ValueError("totals length must match the number of auxiliary columns")
    if not np.all(np.isfinite(T)):
        raise NoFeasibleWeights("calibration totals must be finite")
    A = A_full[R]
    ds = d[R]
    if np.any(~(ds > 0)):
        raise ValueError("design weights must be positive on the calibrated subsample")
    _check_aux(A, ds)

    # column scaling for conditioning; the constraint set is unchanged
    col_scale = np.sum(ds[:, None] * np.abs(A), axis=0)
    col_scale[col_scale == 0] = 1.0
    As = A / col_scale
    Ts = T / col_scale

    if distance is Distance.CHI_SQUARE:
        M = As.T @ (As * ds[:, None])
        lam_s = linalg.solve(M, As.T @ ds - Ts, assume_a="pos")
        gs = 1.0 - As @ lam_s
        iterations = 1
        if np.any(gs < 0):
            warnings.warn(f"chi-square calibration produced {int(np.sum(gs < 0))} negative weight(s)",
                          NegativeWeightWarning, stacklevel=2)
    else:
        lam_s, gs, iterations = _rake(As, ds, Ts, tol, max_iter)

    ws = gs * ds
    resid = np.max(np.abs(As.T @ ws - Ts))
    g = np.zeros(len(d))
    w = np.zeros(len(d))
    g[R] = gs
    w[R] = ws
    return CalibratedWeights(d=d, g=g, w=w, lam=lam_s / col_scale, residual=float(resid),
                             iterations=iterations, distance=distance, mask=R)


def _rake(A, d, T, tol, max_iter):
    """Newton on the dual ``psi(lam) = sum d exp(-A lam) + lam'T`` with step halving."""
    q = A.shape[1]
    lam = np.zeros(q)

    def psi(l):
        e = -A @ l
        if np.max(e) > 700:
            return np.inf
        return float(np.sum(d * np.exp(e)) + l @ T)

    val = psi(lam)
    for it in range(1, max_iter + 1):
        g = np.exp(-A @ lam)
        F = A.T @ (d * g) - T
        if np.max(np.abs(F)) < tol:
            return lam, g, it - 1
        H = A.T @ (A * (d * g)[:, None])
        try:
            step = linalg.solve(H, F, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise NoFeasibleWeights("singular Hessian while raking") from None
        t = 1.0
        while True:
            cand = lam + t * step
            new = psi(cand)
            # the slack term lets Newton finish once psi changes are at round-off
            if new <= val + 1e-4 * t * float(-F @ step) + 1e-13 * abs(val) or t < 1e-12:
                break
            t *= 0.5
        if not np.isfinite(new) or t < 1e-12:
            raise NoFeasibleWeights("raking line search failed; totals are likely infeasible")
        lam, val = cand, new
        if np.max(np.abs(lam)) > 1e6:
            raise NoFeasibleWeights("raking multipliers diverge; totals are likely infeasible")
    g = np.exp(-A @ lam)
    F = A.T @ (d * g) - T
    if np.max(np.abs(F)) < tol:
        return lam, g, max_iter
    raise NoFeasibleWeights(
        f"raking did not converge in {max_iter} iterations (residual {np.max(np.abs(F)):.3g})")


def three_phase_calibrate(design: ThreePhaseDesign, aux_p1, aux_p2,
                          distance: Distance | str = Distance.POISSON_DEVIANCE,
                          *, phase2_target: str = "unweighted"
                          ) -> tuple[CalibratedWeights, CalibratedWeights]:
    """Calibrate phase-2 and phase-3 weights separately.

    ``w1`` calibrates ``d1`` over phase 2 so that ``sum R1 w1 a*`` matches the
    phase-1 total of ``a*``.  ``w2`` calibrates ``d2`` over phase 3 so that
    ``sum R w2 a~`` matches ``sum R1 a~``.  With ``phase2_target="w1"`` the
    phase-2 constraint is instead ``sum R w1 w2 a~ = sum R1 w1 a~``.
    The analysis weight of a fully validated subject is ``w1 * w2``.
    """
    A1 = np.asarray(aux_p1, float)
    A2 = np.asarray(aux_p2, float)
    if A1.ndim == 1:
        A1 = A1[:, None]
    if A2.ndim == 1:
        A2 = A2[:, None]
    w1 = calibrate(design.d1, design.r1, A1, A1.sum(axis=0), distance)
    r1 = design.r1
    if phase2_target == "unweighted":
        target = A2[r1].sum(axis=0)
        A2_eff = A2
    elif phase2_target == "w1":
        A2_eff = np.where(r1[:, None], A2 * w1.w[:, None], np.nan)
        target = A2_eff[r1].sum(axis=0)
    else:
        raise ValueError("phase2_target must be 'unweighted' or 'w1'")
    w2 = calibrate(design.d2, design.r, A2_eff, target, distance)
    return w1, w2
