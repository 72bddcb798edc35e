import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cluster_scores as oracle_scores
from oracles import newton_glm
from triphase import glm
from triphase.errors import (
    ConfigError,
    DegenerateMeatWarning,
    NonConvergence,
    NotConverged,
    RankDeficient,
    Separation,
    SingularBread,
)


def random_glm(seed, family=None):
    rng = np.random.default_rng(seed)
    family = family or ("poisson", "binomial")[seed % 2]
    n = int(rng.integers(30, 80))
    p = int(rng.integers(2, 5))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = rng.normal(scale=0.5, size=p)
    w = rng.uniform(0.5, 3.0, size=n)
    if family == "poisson":
        off = rng.uniform(0.5, 2.0, size=n)
        y = rng.poisson(off * np.exp(X @ beta)).astype(float)
    else:
        off = None
        y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return family, X, y, w, off


def test_modelspec_pairings():
    assert glm.ModelSpec("poisson").link == "log"
    assert glm.ModelSpec("binomial").link == "logit"
    with pytest.raises(ConfigError):
        glm.ModelSpec("poisson", link="logit")
    with pytest.raises(ConfigError):
        glm.ModelSpec("gamma")


def test_poisson_intercept_closed_form():
    y = np.array([0, 3, 1, 4, 2.0])
    t = np.array([1.0, 2.5, 0.7, 3.1, 1.2])
    res = glm.fit("poisson", np.ones((5, 1)), y, offset=t)
    assert res.beta[0] == pytest.approx(np.log(y.sum() / t.sum()), abs=1e-12)


def test_logistic_six_points_matches_newton_oracle():
    X = np.column_stack([np.ones(6), [0.1, -1.2, 0.7, 2.0, -0.3, 1.1]])
    y = np.array([0, 0, 1, 1, 1, 0.0])
    res = glm.fit("binomial", X, y)
    ref, _ = newton_glm("binomial", X, y)
    np.testing.assert_allclose(res.beta, ref, atol=1e-8, rtol=0)
    assert res.converged


def test_zero_weight_equals_deletion():
    family, X, y, w, off = random_glm(3, "poisson")
    w = w.copy()
    w[5] = 0.0
    keep = np.arange(len(y)) != 5
    a = glm.fit(family, X, y, w, off)
    b = glm.fit(family, X[keep], y[keep], w[keep], off[keep])
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-10, rtol=0)


@pytest.mark.parametrize("seed", range(50))
def test_irls_matches_newton_oracle(seed):
    family, X, y, w, off = random_glm(seed)
    res = glm.fit(family, X, y, w, off)
    ref, _ = newton_glm(family, X, y, w, off)
    np.testing.assert_allclose(res.beta, ref, atol=1e-8, rtol=0)
    assert np.max(np.abs(glm.score(family, X, y, res.beta, w, off))) < 1e-6


def test_single_cluster_influence_is_zero():
    family, X, y, w, off = random_glm(4, "binomial")
    res = glm.fit(family, X, y, w, clusters=np.zeros(len(y), int))
    assert res.cluster_infl.shape == (1, X.shape[1])
    np.testing.assert_allclose(res.cluster_infl, 0, atol=1e-8)


def test_two_identical_clusters_equal_and_opposite():
    _, X, y, _, off = random_glm(5, "poisson")
    X2 = np.vstack([X, X])
    y2 = np.r_[y, y]
    res = glm.fit("poisson", X2, y2, offset=np.r_[off, off],
                  clusters=np.r_[np.zeros(len(y), int), np.ones(len(y), int)])
    np.testing.assert_allclose(res.cluster_infl[0], -res.cluster_infl[1], atol=1e-9)


def test_five_cluster_poisson_influence_matches_oracle():
    rng = np.random.default_rng(8)
    n = 25
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    off = rng.uniform(1, 3, n)
    y = rng.poisson(off * np.exp(0.2 + 0.4 * X[:, 1])).astype(float)
    cl = np.repeat(np.arange(5), 5)
    res = glm.fit("poisson", X, y, offset=off, clusters=cl)
    b, H = newton_glm("poisson", X, y, offset=off)
    expected = oracle_scores("poisson", X, y, b, offset=off, clusters=cl) @ np.linalg.inv(H)
    np.testing.assert_allclose(res.cluster_infl, expected, atol=1e-9)
    _, infl = glm.influence(res, X, y, offset=off, clusters=cl)
    np.testing.assert_allclose(infl, expected, atol=1e-9)
    np.testing.assert_allclose(infl.sum(axis=0), 0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 12))
def test_influence_sums_to_zero(seed, n_clusters):
    family, X, y, w, off = random_glm(seed)
    cl = np.random.default_rng(seed).integers(0, n_clusters, len(y))
    res = glm.fit(family, X, y, w, off, clusters=cl)
    scale = np.abs(res.cluster_infl).max() + 1e-300
    assert np.max(np.abs(res.cluster_infl.sum(axis=0))) < 1e-8 * max(scale, 1.0)


def test_influence_requires_convergence():
    family, X, y, w, off = random_glm(6, "binomial")
    res = glm.fit(family, X, y)
    res.converged = False
    with pytest.raises(NotConverged):
        glm.influence(res, X, y)


def test_sandwich_matches_huber_white():
    family, X, y, _, _ = random_glm(9, "binomial")
    res = glm.fit(family, X, y)
    b, H = newton_glm(family, X, y)
    S = oracle_scores(family, X, y, b)
    Hinv = np.linalg.inv(H)
    hw = Hinv @ S.T @ S @ Hinv
    np.testing.assert_allclose(res.vcov_sandwich, hw, rtol=1e-7, atol=1e-12)
    np.testing.assert_allclose(glm.sandwich(res, res.cluster_scores), hw, rtol=1e-7, atol=1e-12)


@pytest.mark.parametrize("c", [0.01, 3.0, 250.0])
def test_sandwich_invariant_to_weight_scale(c):
    family, X, y, w, off = random_glm(10, "poisson")
    cl = np.arange(len(y)) // 3
    a = glm.fit(family, X, y, w, off, clusters=cl)
    b = glm.fit(family, X, y, c * w, off, clusters=cl)
    np.testing.assert_allclose(b.beta, a.beta, atol=1e-10)
    np.testing.assert_allclose(b.vcov_sandwich, a.vcov_sandwich, rtol=1e-8)


def test_sandwich_degenerate_inputs():
    info = np.eye(2)
    with pytest.warns(DegenerateMeatWarning):
        glm.sandwich(info, np.array([[1.0, 2.0]]))
    with pytest.raises(SingularBread):
        glm.sandwich(np.zeros((2, 2)), np.ones((3, 2)))


def test_sandwich_relabeling_invariant(rng):
    U = rng.normal(size=(20, 3))
    info = np.diag([2.0, 3.0, 4.0])
    perm = rng.permutation(20)
    np.testing.assert_allclose(glm.sandwich(info, U), glm.sandwich(info, U[perm]), rtol=1e-12)


def test_sandwich_psd(rng):
    U = rng.normal(size=(30, 4))
    A = rng.normal(size=(4, 4))
    V = glm.sandwich(A @ A.T + 4 * np.eye(4), U)
    np.testing.assert_allclose(V, V.T)
    assert np.linalg.eigvalsh(V).min() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["poisson", "binomial"]))
def test_gradient_check(seed, family):
    family, X, y, w, off = random_glm(seed, family)
    res = glm.fit(family, X, y, w, off)
    rng = np.random.default_rng(seed)
    b = res.beta + rng.normal(scale=0.1, size=len(res.beta))
    g = glm.score(family, X, y, b, w, off)
    eps = 1e-5
    for j in range(len(b)):
        e = np.zeros(len(b))
        e[j] = eps
        fd = (glm.log_likelihood(family, X, y, b + e, w, off)
              - glm.log_likelihood(family, X, y, b - e, w, off)) / (2 * eps)
        assert fd == pytest.approx(g[j], rel=1e-5, abs=1e-5)


def test_multinomial_two_classes_reproduces_binomial():
    family, X, y, w, _ = random_glm(12, "binomial")
    a = glm.fit("binomial", X, y, w)
    m = glm.fit("multinomial", X, y, w, n_classes=2)
    np.testing.assert_allclose(m.beta, a.beta, atol=1e-8)


def test_multinomial_score_zero_and_gradient(rng):
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    B = np.array([[0.2, 0.5, -0.3], [-0.4, 0.1, 0.8]])
    eta = np.column_stack([np.zeros(n), X @ B.T])
    P = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    y = (P.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    res = glm.fit("multinomial", X, y, n_classes=3)
    assert np.max(np.abs(glm.score("multinomial", X, y, res.beta))) < 1e-6
    assert res.coef_matrix.shape == (2, 3)


def test_sandwich_close_to_model_vcov_when_model_true():
    rng = np.random.default_rng(2024)
    n = 20_000
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    off = rng.uniform(0.5, 2, n)
    y = rng.poisson(off * np.exp(X @ np.array([-1.0, 0.3, -0.2]))).astype(float)
    res = glm.fit("poisson", X, y, offset=off)
    ratio = np.trace(res.vcov_sandwich) / np.trace(res.vcov_model)
    assert abs(ratio - 1) < 0.10


def test_rank_deficient_reports_aliased_column():
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    X = np.column_stack([np.ones(40), x, 2 * x])
    y = (rng.random(40) < 0.5).astype(float)
    with pytest.raises(RankDeficient) as err:
        glm.fit("binomial", X, y, names=["(Intercept)", "a", "b"])
    assert set(err.value.aliased) & {"a", "b"}


def test_rank_checked_after_dropping_zero_weights():
    X = np.column_stack([np.ones(6), [1, 2, 3, 4, 5, 6.0]])
    y = np.array([0, 1, 0, 1, 1, 0.0])
    with pytest.raises(RankDeficient):
        glm.fit("binomial", X, y, weights=[1, 0, 0, 0, 0, 0])


def test_nonconvergence_at_iteration_cap():
    family, X, y, w, off = random_glm(13, "binomial")
    with pytest.raises(NonConvergence):
        glm.fit(family, X, y, max_iter=1)


def test_separation_raised():
    X = np.column_stack([np.ones(8), np.arange(8.0)])
    y = (np.arange(8) > 3).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises((Separation, NonConvergence)):
            glm.fit("binomial", X, y)


def test_ridge_keeps_separated_fit_finite():
    X = np.column_stack([np.ones(8), np.arange(8.0)])
    y = (np.arange(8) > 3).astype(float)
    res = glm.fit("binomial", X, y, ridge=1e-6)
    assert np.all(np.isfinite(res.beta)) and np.all(np.isfinite(res.vcov_model))


def test_negative_weights_rejected_unless_allowed():
    family, X, y, w, off = random_glm(14, "binomial")
    w = w.copy()
    w[0] = -0.2
    with pytest.raises(ValueError):
        glm.fit(family, X, y, w)
    res = glm.fit(family, X, y, w, allow_negative=True)
    assert np.max(np.abs(glm.score(family, X, y, res.beta, w))) < 1e-6


def test_fit_linear_matches_lstsq(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = X @ [1.0, 2.0, -1.0] + rng.normal(size=50)
    lf = glm.fit_linear(X, y)
    ref = np.linalg.lstsq(X, y, rcond=None)[0]
    np.testing.assert_allclose(lf.beta, ref, atol=1e-10)
    assert lf.df == 47
    assert lf.sigma2 == pytest.approx(np.sum((y - X @ ref) ** 2) / 47)
