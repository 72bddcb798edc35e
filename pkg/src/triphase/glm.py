"""Weighted generalized linear models fit by Newton-Raphson (IRLS).

Supports Poisson with log link and offset, binomial with logit link, and
baseline-category multinomial logit.  Every fit exposes per-cluster score
contributions, influence functions ``I(beta)^-1 U_i`` and a cluster-robust
sandwich covariance.  A normal linear model (:func:`fit_linear`) is provided
for imputing continuous variables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, log_softmax, logsumexp

from .errors import (
    ConfigError,
    DegenerateMeatWarning,
    NonConvergence,
    NotConverged,
    RankDeficient,
    Separation,
    SingularBread,
)

FAMILIES = ("poisson", "binomial", "multinomial")
CANONICAL_LINK = {"poisson": "log", "binomial": "logit", "multinomial": "logit"}

MAX_ITER = 100
TOL_DEVIANCE = 1e-10
TOL_SCORE = 1e-8
RANK_TOL = 1e-10
SEPARATION_EPS = 1e-8


@dataclass(frozen=True)
class ModelSpec:
    """Analysis or imputation model.

    ``predictors`` lists terms in order; a term is a variable name (``x1``,
    ``x2``, ``x3_1`` ...) or an interaction ``"a:b"``.  Categorical variables
    expand to treatment-coded dummies.
    """

    family: str
    response: str = "y"
    predictors: tuple[str, ...] = ()
    offset_column: str | None = None
    intercept: bool = True
    link: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        link = self.link or CANONICAL_LINK[self.family]
        if link != CANONICAL_LINK[self.family]:
            raise ConfigError(f"family {self.family} requires link {CANONICAL_LINK[self.family]}")
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "predictors", tuple(self.predictors))


@dataclass
class FitResult:
    beta: np.ndarray
    info: np.ndarray
    vcov_model: np.ndarray
    converged: bool
    iterations: int
    family: str
    deviance: float
    names: tuple[str, ...] = ()
    cluster_labels: np.ndarray | None = None
    cluster_scores: np.ndarray | None = None
    cluster_infl: np.ndarray | None = None
    vcov_sandwich: np.ndarray | None = None
    n_classes: int | None = None
    ridge: float = 0.0

    @property
    def se(self) -> np.ndarray:
        v = self.vcov_sandwich if self.vcov_sandwich is not None else self.vcov_model
        return np.sqrt(np.diag(v))

    @property
    def coef_matrix(self) -> np.ndarray:
        """Multinomial coefficients as ``(n_classes - 1, p)``."""
        if self.n_classes is None:
            return self.beta.reshape(1, -1)
        return self.beta.reshape(self.n_classes - 1, -1)


@dataclass
class LinearFit:
    beta: np.ndarray
    sigma2: float
    df: int
    xtx_inv: np.ndarray
    names: tuple[str, ...] = field(default_factory=tuple)

    @property
    def vcov(self) -> np.ndarray:
        return self.sigma2 * self.xtx_inv


# ----------------------------------------------------------------------
# helpers


def cluster_sum(values: np.ndarray, clusters: np.ndarray | None):
    """Sum rows of ``values`` within clusters.

    Returns ``(labels, sums)`` with labels in sorted order.  When
    ``clusters`` is None every row is its own cluster.
    """
    values = np.asarray(values, dtype=float)
    if clusters is None:
        return np.arange(len(values)), values
    clusters = np.asarray(clusters)
    if len(clusters) == 0:
        return clusters[:0], values[:0]
    if clusters.dtype.kind in "iu" and np.all(clusters[1:] >= clusters[:-1]):
        order = None
        c = clusters
    else:
        order = np.argsort(clusters, kind="stable")
        c = clusters[order]
        values = values[order]
    starts = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
    return c[starts], np.add.reduceat(values, starts, axis=0)


def check_rank_or_raise(X: np.ndarray, names: Sequence[str]) -> None:
    if X.shape[0] < X.shape[1]:
        raise RankDeficient(
            f"{X.shape[0]} rows with positive weight for {X.shape[1]} coefficients")
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0:
        return
    tol = RANK_TOL * s[0]
    rank = int(np.sum(s > tol))
    if rank < X.shape[1]:
        _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
        aliased = [names[j] if names else j for j in piv[rank:]]
        raise RankDeficient(f"design matrix is rank deficient; aliased columns {aliased}",
                            aliased=aliased)


def _names(names, p):
    return tuple(names) if names is not None else tuple(f"b{j}" for j in range(p))


def _solve_pd(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(H, check_finite=False)
        return linalg.cho_solve(c, g, check_finite=False)
    except linalg.LinAlgError:
        return linalg.lstsq(H, g, check_finite=False)[0]


def _inverse(H: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(H, check_finite=False)
        inv = linalg.cho_solve(c, np.eye(len(H)), check_finite=False)
    except linalg.LinAlgError:
        inv = np.linalg.inv(H)
    return (inv + inv.T) / 2


# ----------------------------------------------------------------------
# likelihood pieces for the univariate families


def _eta(X, beta, log_offset):
    eta = X @ beta
    if log_offset is not None:
        eta = eta + log_offset
    return eta


def _mean(family, eta):
    e = np.exp(np.minimum(eta, 700.0))
    if family == "binomial":
        return e / (1.0 + e)
    return e


def _softplus(eta):
    """``log(1 + exp(eta))``; the plain form is accurate enough below 30."""
    return np.where(eta > 30.0, eta, np.log(1.0 + np.exp(np.minimum(eta, 30.0))))


def _variance(family, mu):
    if family == "binomial":
        return mu * (1.0 - mu)
    return mu


def _loglik_eta(family, y, eta, w):
    if family == "binomial":
        return float(np.sum(w * (y * eta - _softplus(eta))))
    mu = np.exp(np.minimum(eta, 700.0))
    return float(np.sum(w * (y * eta - mu - gammaln(y + 1.0))))


def _deviance(family, y, eta, w):
    if family == "binomial":
        return -2.0 * _loglik_eta(family, y, eta, w)
    mu = np.exp(np.minimum(eta, 700.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ylogy = np.where(y > 0, y * (np.log(np.where(y > 0, y, 1.0)) - eta), 0.0)
    return float(2.0 * np.sum(w * (ylogy - (y - mu))))


def log_likelihood(family: str, X, y, beta, weights=None, offset=None) -> float:
    """Weighted log-likelihood (multinomial: ``y`` holds class codes)."""
    X = np.asarray(X, float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    if family == "multinomial":
        K = len(beta) // X.shape[1] + 1
        B = np.asarray(beta, float).reshape(K - 1, X.shape[1])
        eta = np.column_stack([np.zeros(len(X)), X @ B.T])
        lp = log_softmax(eta, axis=1)
        return float(np.sum(w * lp[np.arange(len(X)), np.asarray(y, int)]))
    log_off = None if offset is None else np.log(offset)
    return _loglik_eta(family, np.asarray(y, float), _eta(X, np.asarray(beta, float), log_off), w)


def score(family: str, X, y, beta, weights=None, offset=None) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood` with respect to ``beta``."""
    X = np.asarray(X, float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    if family == "multinomial":
        K = len(beta) // X.shape[1] + 1
        P = _multinomial_probs(X, np.asarray(beta, float).reshape(K - 1, X.shape[1]))
        Yd = np.eye(K)[np.asarray(y, int)]
        return ((w[:, None] * (Yd - P))[:, 1:].T @ X).ravel()
    log_off = None if offset is None else np.log(offset)
    mu = _mean(family, _eta(X, np.asarray(beta, float), log_off))
    return X.T @ (w * (np.asarray(y, float) - mu))


def _multinomial_probs(X, B):
    eta = np.column_stack([np.zeros(len(X)), X @ B.T])
    return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


# ----------------------------------------------------------------------
# fitting


def fit(spec: ModelSpec | str, X, y, weights=None, offset=None, clusters=None, *,
        names: Sequence[str] | None = None, ridge: float = 0.0,
        n_classes: int | None = None, max_iter: int = MAX_ITER,
        check_rank: bool = True, start: np.ndarray | None = None,
        allow_negative: bool = False) -> FitResult:
    """Solve the weighted score equations ``sum_i w_i S_i(beta) = 0``.

    Parameters
    ----------
    spec : ModelSpec or family name
    X : (n, p) design matrix
    y : responses; class codes ``0..K-1`` for multinomial (0 is baseline)
    weights : nonnegative case weights (default 1)
    offset : positive person-time; ``log(offset)`` enters the linear predictor
    clusters : cluster labels for the sandwich and influence functions
        (default: every row is its own cluster)
    ridge : L2 penalty on all non-constant columns; disables the separation
        check.  Used for imputation models only.
    allow_negative : accept negative weights (chi-square calibrated weights)
    """
    family = spec.family if isinstance(spec, ModelSpec) else spec
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    n, p = X.shape
    y = np.asarray(y, dtype=float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(w)) or (not allow_negative and np.any(w < 0)):
        raise ValueError("weights must be finite and nonnegative")
    names = _names(names, p)
    pos = w != 0
    if not np.all(np.isfinite(X[pos])) or not np.all(np.isfinite(y[pos])):
        raise ValueError("design matrix and response must be finite on rows with nonzero weight")
    if check_rank:
        check_rank_or_raise(X[pos], names)
    log_off = None if offset is None else np.log(np.asarray(offset, dtype=float))
    if log_off is not None and not np.all(np.isfinite(log_off)):
        raise ValueError("offset must be positive")
    penal = np.ones(p)
    const = (np.ptp(X, axis=0) == 0) if n else np.zeros(p, bool)
    penal[const] = 0.0

    if family == "multinomial":
        res = _fit_multinomial(X, y.astype(int), w, n_classes, ridge, penal, max_iter, start)
    else:
        res = _fit_univariate(family, X, y, w, log_off, ridge, penal, max_iter, start)
    beta, info, converged, iterations, dev, K = res

    if family == "binomial" and ridge == 0.0:
        mu = expit(_eta(X, beta, log_off))[pos]
        extreme = (mu < SEPARATION_EPS) | (mu > 1.0 - SEPARATION_EPS)
        if extreme.any() and np.max(np.abs(beta)) > 10.0:
            raise Separation(
                f"{int(extreme.sum())} fitted probabilities within {SEPARATION_EPS} of 0/1 "
                f"with coefficient norm {np.max(np.abs(beta)):.1f}")
    if not converged:
        raise NonConvergence(f"{family} fit did not converge in {max_iter} iterations")

    try:
        vcov = _inverse(info)
    except np.linalg.LinAlgError as exc:
        raise SingularBread(str(exc)) from None
    result = FitResult(beta=beta, info=info, vcov_model=vcov, converged=converged,
                       iterations=iterations, family=family, deviance=dev, names=names,
                       n_classes=K, ridge=ridge)
    contrib = _score_contributions(family, X, y, w, log_off, beta, K)
    labels, U = cluster_sum(contrib, clusters)
    result.cluster_labels = labels
    result.cluster_scores = U
    result.cluster_infl = U @ vcov
    V = vcov @ (U.T @ U) @ vcov
    result.vcov_sandwich = (V + V.T) / 2
    return result


def _score_contributions(family, X, y, w, log_off, beta, K):
    if family == "multinomial":
        P = _multinomial_probs(X, beta.reshape(K - 1, X.shape[1]))
        Yd = np.eye(K)[y.astype(int)]
        R = (w[:, None] * (Yd - P))[:, 1:]
        return (R[:, :, None] * X[:, None, :]).reshape(len(X), -1)
    mu = _mean(family, _eta(X, beta, log_off))
    return X * (w * (y - mu))[:, None]


def _start_univariate(family, X, y, w, log_off):
    if family == "binomial":
        mu = (w * y + 0.5) / (w + 1.0)
        eta = np.log(mu / (1.0 - mu))
        v = mu * (1.0 - mu)
    else:
        mu = y + 0.1
        eta = np.log(mu)
        v = mu
    if log_off is not None:
        eta = eta - log_off
    z = eta + (y - mu) / v
    wv = w * v
    H = X.T @ (X * wv[:, None])
    return _solve_pd(H + 1e-12 * np.eye(len(H)), X.T @ (wv * z))


def _fit_univariate(family, X, y, w, log_off, ridge, penal, max_iter, start):
    if family == "binomial" and np.any((y != 0) & (y != 1)):
        raise ValueError("binomial response must be 0/1")
    if family == "poisson" and np.any(y < 0):
        raise ValueError("Poisson response must be nonnegative")
    beta = _start_univariate(family, X, y, w, log_off) if start is None else np.array(start, float)
    P = ridge * np.diag(penal)
    X = np.asfortranarray(X)

    def objective(b, eta):
        return _deviance(family, y, eta, w) + ridge * float(b @ (penal * b))

    eta = _eta(X, beta, log_off)
    dev = objective(beta, eta)
    mu = _mean(family, eta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = X.T @ (w * (y - mu)) - P @ beta
        H = X.T @ (X * (w * _variance(family, mu))[:, None]) + P
        if np.max(np.abs(g)) < TOL_SCORE:
            converged = True
            break
        step = _solve_pd(H, g)
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = _eta(X, cand, log_off)
            dev_new = objective(cand, eta_c)
            if dev_new <= dev + 1e-12 * abs(dev) or t < 1e-10:
                break
            t *= 0.5
        beta, eta = cand, eta_c
        rel = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        dev = dev_new
        mu = _mean(family, eta)
        if rel < TOL_DEVIANCE:
            converged = True
            break
    info = X.T @ (X * (w * _variance(family, mu))[:, None]) + P
    if converged:
        # one closing Newton step; the deviance test stops a step early
        beta = beta + _solve_pd(info, X.T @ (w * (y - mu)) - P @ beta)
    return beta, (info + info.T) / 2, converged, it, dev, None


def _fit_multinomial(X, y, w, n_classes, ridge, penal, max_iter, start):
    n, p = X.shape
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if K < 2:
        raise ValueError("multinomial response needs at least two classes")
    if np.any((y < 0) | (y >= K)):
        raise ValueError("class codes must lie in 0..K-1")
    Yd = np.eye(K)[y]
    pen = np.tile(penal, K - 1)

    def objective(b):
        B = b.reshape(K - 1, p)
        eta = np.column_stack([np.zeros(n), X @ B.T])
        ll = np.sum(w * (eta[np.arange(n), y] - logsumexp(eta, axis=1)))
        return -2.0 * ll + ridge * float(b @ (pen * b))

    def grad_hess(b):
        Pm = _multinomial_probs(X, b.reshape(K - 1, p))
        R = (w[:, None] * (Yd - Pm))[:, 1:]
        g = (R.T @ X).ravel() - ridge * pen * b
        H = np.empty(((K - 1) * p, (K - 1) * p))
        for k in range(1, K):
            for l in range(k, K):
                c = Pm[:, k] * ((k == l) - Pm[:, l]) * w
                blk = X.T @ (X * c[:, None])
                H[(k - 1) * p:k * p, (l - 1) * p:l * p] = blk
                H[(l - 1) * p:l * p, (k - 1) * p:k * p] = blk.T
        H += ridge * np.diag(pen)
        return g, H

    if start is None:
        beta = np.zeros((K - 1) * p)
        prev = np.bincount(y, weights=w, minlength=K) + 0.5
        const = np.flatnonzero(penal == 0)
        if const.size:
            for k in range(1, K):
                beta[(k - 1) * p + const[0]] = np.log(prev[k] / prev[0]) / max(X[0, const[0]], 1e-12)
    else:
        beta = np.array(start, float)
    dev = objective(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g, H = grad_hess(beta)
        step = _solve_pd(H, g)
        t = 1.0
        while True:
            cand = beta + t * step
            dev_new = objective(cand)
            if dev_new <= dev + 1e-12 * abs(dev) or t < 1e-10:
                break
            t *= 0.5
        beta = cand
        rel = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        dev = dev_new
        g, H = grad_hess(beta)
        if rel < TOL_DEVIANCE or np.max(np.abs(g)) < TOL_SCORE:
            converged = True
            break
    _, H = grad_hess(beta)
    return beta, (H + H.T) / 2, converged, it, dev, K


def fit_linear(X, y, weights=None, *, names: Sequence[str] | None = None,
               check_rank: bool = True) -> LinearFit:
    """Normal linear model by (weighted) least squares."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    names = _names(names, X.shape[1])
    if check_rank:
        check_rank_or_raise(X[w > 0], names)
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[:, None])
    beta = linalg.solve_triangular(R, Q.T @ (y * sw))
    resid = y - X @ beta
    df = int(np.sum(w > 0)) - X.shape[1]
    if df <= 0:
        raise RankDeficient("no residual degrees of freedom for the linear model")
    sigma2 = float(np.sum(w * resid ** 2) / df)
    Rinv = linalg.solve_triangular(R, np.eye(len(R)))
    return LinearFit(beta=beta, sigma2=sigma2, df=df, xtx_inv=Rinv @ Rinv.T, names=names)


# ----------------------------------------------------------------------
# influence functions and sandwich


def cluster_scores(fit_result: FitResult, X, y, weights=None, offset=None, clusters=None):
    """Per-cluster score sums ``sum_{m in i} w_m S_m(beta)`` at the fitted ``beta``."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, float)
    log_off = None if offset is None else np.log(np.asarray(offset, float))
    contrib = _score_contributions(fit_result.family, X, y, w, log_off,
                                   fit_result.beta, fit_result.n_classes)
    return cluster_sum(contrib, clusters)


def influence(fit_result: FitResult, X, y, weights=None, offset=None, clusters=None):
    """Per-cluster influence vectors ``I(beta)^-1 sum_{m in i} w_m S_m(beta)``.

    With the fit's own weights the vectors sum to zero at the estimate.
    Passing unit weights for a weighted fit gives the unweighted influence
    functions used as calibration auxiliaries.
    """
    if not fit_result.converged:
        raise NotConverged("influence functions need a converged fit")
    labels, U = cluster_scores(fit_result, X, y, weights, offset, clusters)
    return labels, U @ fit_result.vcov_model


def sandwich(bread: FitResult | np.ndarray, contributions: np.ndarray | None = None, *,
             meat: np.ndarray | None = None) -> np.ndarray:
    """``I^-1 (sum_i U_i U_i^t) I^-1`` for per-unit contributions ``U_i``.

    A precomputed ``meat`` may be passed instead of the contributions.
    """
    info = bread.info if isinstance(bread, FitResult) else np.asarray(bread, float)
    if meat is None:
        U = np.atleast_2d(np.asarray(contributions, float))
        if U.shape[1] != info.shape[0]:
            raise ValueError("contribution dimension does not match the bread")
        meat = U.T @ U
        degenerate = len(U) < 2 or not np.any(meat)
    else:
        meat = np.asarray(meat, float)
        degenerate = not np.any(meat)
    s = np.linalg.svd(info, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-14 * max(s[0], 1e-300):
        raise SingularBread("information matrix is singular")
    if degenerate:
        warnings.warn("sandwich meat is degenerate (fewer than two units or zero scores)",
                      DegenerateMeatWarning, stacklevel=2)
    inv = _inverse(info)
    V = inv @ meat @ inv
    return (V + V.T) / 2
