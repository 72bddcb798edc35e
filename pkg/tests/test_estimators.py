import dataclasses
import warnings

import numpy as np
import pytest

from conftest import small_cohort
from oracles import newton_glm
from triphase import glm
from triphase.data import Cohort
from triphase.design import ThreePhaseDesign, from_stratified_counts
from triphase.errors import ImputationSetMismatch, InvalidValue
from triphase.estimators import (
    Z95,
    EstimateReport,
    imputed_auxiliaries,
    ipw,
    naive_influence,
    phase2_influence,
    raking_with_mi,
    three_phase_raking,
    two_phase_raking,
    _calibrated_vcov,
    _weighted_fit,
)
from triphase.mi import mi_estimate
from triphase.simulation import ANALYSIS_SPEC, SimConfig, generate_cohort, sample_phases, stream

SPEC = ANALYSIS_SPEC


@pytest.fixture(scope="module")
def design(cohort):
    return from_stratified_counts(cohort)


def poisson_toy(seed=0):
    """40 single-month subjects in two strata sampled with probability 1 and 0.25."""
    rng = np.random.default_rng(seed)
    n = 40
    x = rng.normal(size=n)
    t = rng.uniform(0.5, 3.0, n)
    y = rng.poisson(t * np.exp(-0.5 + 0.6 * x)).astype(float)
    stratum = np.where(np.arange(n) < 16, "A", "B")
    r = np.ones(n, bool)
    r[16:] = False
    r[16:40:4] = True
    nan = np.full(n, np.nan)
    cohort = Cohort(
        subject_ids=np.array([f"p{i}" for i in range(n)], dtype=object), r1=r, r2=r,
        stratum_p2=stratum.astype(object), stratum_p3=np.where(r, "T", "").astype(object),
        row_subject=np.arange(n), month=np.ones(n, int), offset=t,
        values={"y_star": (y > 0).astype(float), "x1_star": x + rng.normal(size=n),
                "y_tilde": np.where(r, (y > 0), nan), "x1_tilde": np.where(r, x, nan),
                "y_true": np.where(r, np.minimum(y, 1), nan), "x1_true": np.where(r, x, nan)},
        x3=np.zeros((n, 0)))
    return cohort


def test_ipw_two_strata_matches_weighted_newton():
    c = poisson_toy()
    d = from_stratified_counts(c)
    assert set(np.round(d.pi1, 12)) == {1.0, 0.25}
    spec = glm.ModelSpec("poisson", "y", ("x1",), offset_column="offset")
    rep = ipw(c, d, spec)
    r = c.r
    X = np.column_stack([np.ones(r.sum()), c.values["x1_true"][r]])
    ref, _ = newton_glm("poisson", X, c.values["y_true"][r], d.d[r], c.offset[r])
    np.testing.assert_allclose(rep.beta, ref, atol=1e-8)
    np.testing.assert_allclose(rep.irr, np.exp(rep.beta))


def test_ipw_identity_design_is_validated_mle(cohort):
    n = cohort.n1
    d = ThreePhaseDesign(pi1=np.ones(n), pi2=np.ones(n), r1=cohort.r1, r2=cohort.r2,
                         stratum_p2=cohort.stratum_p2, stratum_p3=cohort.stratum_p3)
    rep = ipw(cohort, d, SPEC)
    rows = cohort.row_mask(cohort.r)
    X = np.column_stack([np.ones(rows.sum()), cohort.values["x1_true"][rows], cohort.x3[rows, 0]])
    ref, _ = newton_glm("binomial", X, cohort.values["y_true"][rows])
    np.testing.assert_allclose(rep.beta, ref, atol=1e-8)


def test_report_fields(cohort, design):
    rep = ipw(cohort, design, SPEC)
    np.testing.assert_allclose(rep.ci95[:, 0], rep.beta - Z95 * rep.se)
    np.testing.assert_allclose(rep.ci95[:, 1], rep.beta + Z95 * rep.se)
    assert rep.irr is None
    recs = rep.records()
    assert [r["term"] for r in recs] == ["(Intercept)", "x1", "x3_1"]
    assert np.isnan(recs[0]["irr"])
    assert '"method": "ipw"' in rep.to_json()


@pytest.mark.parametrize("dist", ["chi_square", "poisson_deviance"])
def test_calibration_residuals_small(cohort, design, dist):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for rep in (two_phase_raking(cohort, design, SPEC, distance=dist),
                    three_phase_raking(cohort, design, SPEC, distance=dist)):
            assert all(c["residual"] < 1e-6 for c in rep.diagnostics["calibration"])


def census_phase2(seed, n1=900, n3=150):
    """Everyone chart-reviewed; phase 3 is a stratified sample on E*."""
    cfg = SimConfig(n1=n1, n2=n1, n3=n3, truth="gamma")
    full, _ = generate_cohort(cfg, stream(seed, 0, 0))
    rng = np.random.default_rng(seed)
    e_star = np.bincount(full.row_subject, weights=full.values["y_star"], minlength=n1) > 0
    r2 = np.zeros(n1, bool)
    for e in (False, True):
        idx = np.flatnonzero(e_star == e)
        r2[rng.choice(idx, n3 // 2, replace=False)] = True
    rows = full.row_mask(r2)
    values = {k: (np.where(rows, v, np.nan) if k.endswith("_true") else v)
              for k, v in full.values.items()}
    lab = np.where(e_star, "E*=1", "E*=0").astype(object)
    return dataclasses.replace(full, r2=r2, values=values, stratum_p2=np.full(n1, "all", object),
                               stratum_p3=lab)


def test_census_collapse_three_to_two_phase():
    c = census_phase2(3)
    d = from_stratified_counts(c)
    np.testing.assert_array_equal(d.d1, 1.0)
    a_tilde = phase2_influence(c, d, SPEC, "tilde")
    g3 = three_phase_raking(c, d, SPEC, aux_p2=a_tilde)
    g2 = two_phase_raking(c, d, SPEC, aux=a_tilde)
    np.testing.assert_allclose(g3.beta, g2.beta, atol=1e-9)
    np.testing.assert_allclose(g3.vcov, g2.vcov, rtol=1e-6, atol=1e-12)


def test_duplicate_phase_data_collapse():
    c = census_phase2(4)
    c = c.with_values({"y_tilde": c.values["y_star"].copy(), "x1_tilde": c.values["x1_star"].copy()})
    d = from_stratified_counts(c)
    np.testing.assert_allclose(phase2_influence(c, d, SPEC, "tilde"),
                               naive_influence(c, SPEC, "star"), atol=1e-10)
    g3 = three_phase_raking(c, d, SPEC)
    g2 = two_phase_raking(c, d, SPEC)
    np.testing.assert_allclose(g3.beta, g2.beta, atol=1e-6)


def test_noise_auxiliary_matches_ipw_efficiency():
    c, _ = small_cohort(n1=6000, n2=3000, n3=1500, seed=5)
    d = from_stratified_counts(c)
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(c.n1, 3))
    g = two_phase_raking(c, d, SPEC, aux=noise)
    i = ipw(c, d, SPEC)
    ratio = g.se[1:] / i.se[1:]
    assert np.all((ratio > 0.95) & (ratio < 1.05)), ratio


def test_error_free_phase1_gives_smaller_se_than_ipw():
    """Paired replicates with Y* = Y and X* = X: raking beats IPW on every replicate's SE
    and on the empirical spread across replicates."""
    cfg = SimConfig(n1=2000, n2=800, n3=200, truth="gamma")
    se_ratio, est = [], []
    for rep in range(200):
        full, _ = generate_cohort(cfg, stream(77, rep, 0))
        full = full.with_values({"y_star": full.values["y_true"].copy(),
                                 "x1_star": full.values["x1_true"].copy()})
        c = sample_phases(full, cfg, stream(77, rep, 1))
        d = from_stratified_counts(c)
        a, b = ipw(c, d, SPEC), two_phase_raking(c, d, SPEC)
        se_ratio.append(b.se[1] / a.se[1])
        est.append((a.beta[1], b.beta[1]))
    est = np.array(est)
    assert np.max(se_ratio) < 1.0
    assert np.std(est[:, 1]) < np.std(est[:, 0])


def test_chi_square_and_raking_agree(cohort, design):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for fn in (two_phase_raking, three_phase_raking):
            a = fn(cohort, design, SPEC, distance="chi_square")
            b = fn(cohort, design, SPEC, distance="poisson_deviance")
            assert np.all(np.abs(a.beta - b.beta) < 0.5 * b.se)


@pytest.mark.parametrize("c", [0.1, 7.0])
def test_weight_rescaling_invariance(cohort, design, c):
    scaled = design.rescaled(c)
    for fn in (ipw, two_phase_raking, three_phase_raking):
        a, b = fn(cohort, design, SPEC), fn(cohort, scaled, SPEC)
        np.testing.assert_allclose(b.beta, a.beta, atol=1e-10)
        np.testing.assert_allclose(b.vcov, a.vcov, rtol=1e-8)
    _, imp = mi_estimate(cohort, SPEC, 2, "three_phase", 1, design=design, auxiliary=True)
    _, imp_s = mi_estimate(cohort, SPEC, 2, "three_phase", 1, design=scaled, auxiliary=True)
    a = raking_with_mi(cohort, design, SPEC, imp)
    b = raking_with_mi(cohort, scaled, SPEC, imp_s)
    np.testing.assert_allclose(b.beta, a.beta, atol=1e-10)
    np.testing.assert_allclose(b.vcov, a.vcov, rtol=1e-8)


def test_variance_options(cohort, design):
    lin = three_phase_raking(cohort, design, SPEC, variance="linearized")
    sand = three_phase_raking(cohort, design, SPEC, variance="sandwich")
    np.testing.assert_array_equal(lin.beta, sand.beta)
    assert np.all(lin.se < sand.se * 1.05)


def test_intercept_only_linearization_is_ipw_sandwich(cohort, design):
    """Weighted scores sum to zero, so their residual on an intercept is the score
    itself and the linearized meat collapses to sum w^2 U U'."""
    mask = design.r
    d = np.where(mask, design.d, 0.0)
    res, idx, U = _weighted_fit(cohort, SPEC, mask, d)
    w = d[idx]
    V = _calibrated_vcov(res, U, w, [(w - 1.0, np.ones((len(w), 1)))], "linearized")
    np.testing.assert_allclose(V, ipw(cohort, design, SPEC).vcov, rtol=1e-8)


def test_no_error_census_collapse_to_mle():
    cfg = SimConfig(n1=600, n2=600, n3=600, truth="gamma")
    full, _ = generate_cohort(cfg, stream(9, 0, 0))
    c = full.with_values({"y_star": full.values["y_true"].copy(),
                          "x1_star": full.values["x1_true"].copy(),
                          "y_tilde": full.values["y_true"].copy(),
                          "x1_tilde": full.values["x1_true"].copy()})
    d = from_stratified_counts(c)
    X = np.column_stack([np.ones(c.n_rows), c.values["x1_true"], c.x3[:, 0]])
    mle, _ = newton_glm("binomial", X, c.values["y_true"])
    reports = [ipw(c, d, SPEC), two_phase_raking(c, d, SPEC), three_phase_raking(c, d, SPEC)]
    for mode, phases in (("two_phase", 2), ("three_phase", 3)):
        rep, imp = mi_estimate(c, SPEC, 3, mode, 0, design=d, auxiliary=True)
        reports += [rep, raking_with_mi(c, d, SPEC, imp, phases=phases)]
    for rep in reports:
        np.testing.assert_allclose(rep.beta, mle, atol=1e-8, err_msg=rep.method)


def test_raking_with_identical_imputations(cohort, design):
    _, imp = mi_estimate(cohort, SPEC, 2, "three_phase", 5, design=design, auxiliary=True)
    ds = imp.datasets[0]
    copies = dataclasses.replace(imp, B=4, datasets=[ds] * 4)
    a1, a2 = imputed_auxiliaries(cohort, design, SPEC, [ds])
    rep = raking_with_mi(cohort, design, SPEC, copies)
    ref = three_phase_raking(cohort, design, SPEC, aux_p1=a1, aux_p2=a2)
    np.testing.assert_allclose(rep.beta, ref.beta, atol=1e-12)
    np.testing.assert_allclose(rep.vcov, ref.vcov, atol=1e-14)
    assert rep.diagnostics["B"] == 4
    rep2 = raking_with_mi(cohort, design, SPEC, dataclasses.replace(copies), phases=2)
    ref2 = two_phase_raking(cohort, design, SPEC, aux=a1)
    np.testing.assert_allclose(rep2.beta, ref2.beta, atol=1e-12)


def test_accumulated_and_recomputed_auxiliaries_agree(cohort, design):
    _, imp = mi_estimate(cohort, SPEC, 3, "three_phase", 6, design=design, auxiliary=True)
    a1, a2 = imputed_auxiliaries(cohort, design, SPEC, imp.datasets)
    np.testing.assert_allclose(a1, imp.aux_p1, atol=1e-7)
    np.testing.assert_allclose(a2, imp.aux_p2, atol=1e-7, equal_nan=True)


def test_imputation_set_mismatch(cohort, design):
    _, imp = mi_estimate(cohort, SPEC, 2, "three_phase", 5, design=design, auxiliary=True)
    bad = dataclasses.replace(imp.datasets[1], subject_ids=imp.datasets[1].subject_ids[::-1])
    with pytest.raises(ImputationSetMismatch):
        raking_with_mi(cohort, design, SPEC, dataclasses.replace(imp, datasets=[imp.datasets[0], bad]))
    with pytest.raises(ImputationSetMismatch):
        raking_with_mi(cohort, design, SPEC, dataclasses.replace(imp, datasets=imp.datasets[:1]))
    with pytest.raises(InvalidValue):
        raking_with_mi(cohort, design, SPEC, dataclasses.replace(imp, B=1))


def test_too_few_validated_subjects(cohort):
    r2 = np.zeros(cohort.n1, bool)
    r2[np.flatnonzero(cohort.r)[:3]] = True
    values = {k: (np.where(cohort.row_mask(r2), v, np.nan) if k.endswith("_true") else v)
              for k, v in cohort.values.items()}
    c = dataclasses.replace(cohort, r2=r2, values=values,
                            stratum_p3=np.where(cohort.r1, "T", "").astype(object))
    d = from_stratified_counts(c)
    with pytest.raises((InvalidValue, glm.RankDeficient, glm.Separation, glm.NonConvergence)):
        ipw(c, d, SPEC)


def test_estimate_report_poisson_irr():
    rep = EstimateReport("ipw", ("a", "b"), np.array([0.1, -0.2]), np.eye(2) * 0.01, "poisson")
    np.testing.assert_allclose([r["irr"] for r in rep.records()], np.exp([0.1, -0.2]))
