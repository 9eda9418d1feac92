from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdtr.dataset import partition_folds
from ssdtr.imputation import impute_value
from ssdtr.propensity import fit_propensities
from ssdtr.regressors import OracleImputer, make_imputer
from ssdtr.simulate import Policy, draw, gen_continuous
from ssdtr.ssq import fit_supervised_q, q1_star, q2_minus
from ssdtr.value_dr import (DegeneratePropensityError, ThetaBundle, crossvalidated_value,
                            evaluate_policy, fit_pipeline, ipw_weights, ipw_weights_row, pack,
                            smoothed_gate, smoothed_value, smoothed_weights, ssl_dr_scores,
                            sup_dr_scores, unpack, value_derivatives, value_q_plugin,
                            value_ssl_dr, variance_value)


@pytest.fixture
def bundle(cont_cohort):
    lab = cont_cohort.labeled
    return ThetaBundle(fit_supervised_q(lab), fit_propensities(lab, cont_cohort.names))


def true_mu(lab, w2):
    return {"v2": lab.y2, "w2": w2, "w2y2": w2 * lab.y2, "w2y3": w2 * lab.y3}


# ---------------------------------------------------------------- weights


def test_weight_examples():
    assert ipw_weights_row(1, 1, 0.5, 1, 1, 0.5)[0] == 2
    w1, w2 = ipw_weights_row(1, 0, 0.3, 1, 1, 0.5)
    assert w1 == 0 and w2 == 0
    assert ipw_weights_row(1, 1, 0.4, 0, 0, 0.25)[1] == pytest.approx(10 / 3, rel=1e-14)
    with pytest.raises(DegeneratePropensityError):
        ipw_weights_row(1, 1, 1.0, 0, 0, 0.5)


def test_weight_discordance(cont_cohort, bundle):
    lab = cont_cohort.labeled
    w1, w2 = ipw_weights(lab, cont_cohort.names, bundle)
    q = bundle.q
    d1 = (lab.h11 @ q.gamma1 > 0).astype(float)
    d2 = (lab.h21 @ q.gamma2 > 0).astype(float)
    off = (d1 != lab.a1) | (d2 != lab.a2)
    assert off.any() and np.all(w2[off] == 0)
    assert np.all(w1[d1 != lab.a1] == 0)


def test_gate_examples():
    assert smoothed_gate(0.0) == 0.5
    assert smoothed_gate(0.3, h=1e-4) == pytest.approx(1.0)
    w1, _ = smoothed_weights(1.0, 0.0, 0.5, 1.0, 0.0, 0.5)
    assert w1 == 1.0
    with pytest.raises(ValueError):
        smoothed_gate(1.0, h=0)


# ---------------------------------------------------------------- estimators


def test_sup_dr_without_concordance_is_mean_q1(cont_cohort, bundle):
    lab = cont_cohort.labeled
    # actions opposite to the regime at stage 1 zero both weights
    d1 = (lab.h11 @ bundle.q.gamma1 > 0).astype(float)
    flipped = replace(lab, a1=1 - d1)
    s = sup_dr_scores(flipped, cont_cohort.names, bundle)
    np.testing.assert_allclose(s, q1_star(bundle.q, lab.h10, lab.h11), atol=1e-12)


def test_sup_dr_zero_residuals(cont_cohort, bundle):
    lab = cont_cohort.labeled
    q = bundle.q
    q1 = q1_star(q, lab.h10, lab.h11)
    q2m = q2_minus(q, lab.h20, lab.h21)
    # Y3 = Q2* and Y2 = Q1* - Q2-  - beta21*Y2 solved for Y2
    y2 = (q1 - q2m) / (1 + q.beta21)
    y3 = q.beta21 * y2 + q2m
    clean = replace(lab, y2=y2, y3=y3)
    s = sup_dr_scores(clean, cont_cohort.names, bundle)
    np.testing.assert_allclose(s.mean(), q1.mean(), atol=1e-10)


def test_ssl_equals_sup_with_true_imputations(cont_cohort, bundle):
    lab, names = cont_cohort.labeled, cont_cohort.names
    _, w2 = ipw_weights(lab, names, bundle)
    np.testing.assert_allclose(ssl_dr_scores(lab, names, bundle, true_mu(lab, w2)),
                               sup_dr_scores(lab, names, bundle), atol=1e-10)


def test_ssl_pipeline_with_oracle_matches_sup(cont_cohort):
    c = cont_cohort.labeled_as_unlabeled()
    sup = fit_pipeline(c, "sup-dr").value
    ssl = fit_pipeline(c, "ssl-dr", OracleImputer()).value
    assert ssl.estimate == pytest.approx(sup.estimate, abs=1e-10)
    # oracle imputations leave no imputation noise, so only the estimates agree
    assert ssl.se <= sup.se


def test_ssl_zero_imputations(cont_cohort, bundle):
    lab, names = cont_cohort.labeled, cont_cohort.names
    q = bundle.q
    b0 = ThetaBundle(q.replace(q.theta1, np.r_[0.0, q.theta2[1:]]), bundle.prop)
    zero = {k: np.zeros(lab.size) for k in ("v2", "w2", "w2y2", "w2y3")}
    w1, _ = ipw_weights(lab, names, b0, stage2=False)
    q1 = q1_star(b0.q, lab.h10, lab.h11)
    q2m = q2_minus(b0.q, lab.h20, lab.h21)
    np.testing.assert_allclose(ssl_dr_scores(lab, names, b0, zero), q1 * (1 - w1) + w1 * q2m,
                               atol=1e-12)


def test_q_plugin(cont_cohort, bundle):
    lab = cont_cohort.labeled
    q = bundle.q
    zero = q.replace(np.zeros_like(q.theta1), q.theta2)
    assert value_q_plugin(zero, lab).estimate == 0
    # a huge negative intercept switches the hinge off on every row
    neg = q.replace(np.r_[q.theta1[:2], -1e6, 0.0], q.theta2)
    assert value_q_plugin(neg, lab).estimate == pytest.approx(np.mean(lab.h10 @ q.theta1[:2]))


def test_variance_of_constant_influence():
    assert variance_value(np.full(16, -2.0)) == pytest.approx(0.5)


def test_missing_imputations(cont_cohort, bundle):
    lab, unl, names = cont_cohort.labeled, cont_cohort.unlabeled, cont_cohort.names
    folds = partition_folds(lab.size, 5, 0)
    w1, w2 = ipw_weights(lab, names, bundle)
    vimp = impute_value(lab, unl, folds, make_imputer("be"), w1, w2,
                        q2_minus(bundle.q, lab.h20, lab.h21))
    infl = np.zeros((lab.size, pack(bundle).size - bundle.prop.xi.size))
    est = value_ssl_dr(lab, unl, names, bundle, vimp, infl)
    assert np.isfinite(est.estimate) and est.se > 0
    broken = replace(vimp, unlabeled={k: v for k, v in vimp.unlabeled.items() if k != "w2"})
    with pytest.raises(ValueError):
        value_ssl_dr(lab, unl, names, bundle, broken, infl)


# ---------------------------------------------------------------- derivatives


def _fd_check(lab, names, b, h=1.0, eps=1e-6):
    base = pack(b)
    Dt, Dx = value_derivatives(lab, names, b, h)
    analytic = np.r_[Dt.sum(0), Dx.sum(0)]
    numeric = np.empty_like(base)
    for j in range(base.size):
        e = np.zeros_like(base)
        e[j] = eps
        up = smoothed_value(lab, names, unpack(base + e, b), h).sum()
        dn = smoothed_value(lab, names, unpack(base - e, b), h).sum()
        numeric[j] = (up - dn) / (2 * eps)
    return analytic, numeric


def test_gradient_matches_finite_differences(cont_cohort, bundle):
    lab, names = cont_cohort.labeled, cont_cohort.names
    rng = np.random.default_rng(2024)
    base = pack(bundle)
    for _ in range(20):
        b = unpack(base + rng.normal(scale=0.1, size=base.size), bundle)
        analytic, numeric = _fd_check(lab, names, b)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0)
        assert rel.max() <= 1e-5


def test_gradient_hand_row(cont_cohort, bundle):
    one = cont_cohort.labeled.subset([0])
    y2, y3 = 0.7, -1.3
    row = replace(one, a1=np.ones(1), a2=np.ones(1), y2=np.array([y2]), y3=np.array([y3]),
                  h10=np.ones_like(one.h10), h11=np.ones_like(one.h11),
                  h20=np.ones_like(one.h20), h21=np.ones_like(one.h21))
    zero = unpack(np.zeros(pack(bundle).size), bundle)
    Dt, Dx = value_derivatives(row, cont_cohort.names, zero)
    p10, p11, p20, p21 = zero.q.dims
    expect = np.r_[np.zeros(p10), np.full(p11, 0.5 * (y2 + y3)), 0.0, np.zeros(p20),
                   np.full(p21, 0.5 * y3)]
    np.testing.assert_allclose(Dt[0], expect, atol=1e-14)
    # xi1 acts on (1, o1) and xi2 on (y2, 1, o1, a1, o2) for the unit row
    nx1 = zero.prop.xi1.size
    np.testing.assert_allclose(Dx[0, :nx1], -0.5 * (y2 + y3), atol=1e-14)
    np.testing.assert_allclose(Dx[0, nx1], -0.5 * y3 * y2, atol=1e-14)
    np.testing.assert_allclose(Dx[0, nx1 + 1:], -0.5 * y3, atol=1e-14)


def test_saturated_gates_have_no_gamma_derivative(cont_cohort, bundle):
    lab, names = cont_cohort.labeled, cont_cohort.names
    q = bundle.q
    scale = np.r_[1.0, 1.0, 1e4, 1e4], np.r_[np.ones(6), np.full(3, 1e4)]
    big = ThetaBundle(q.replace(q.theta1 * scale[0], q.theta2 * scale[1]), bundle.prop)
    keep = (np.abs(lab.h11 @ big.q.gamma1) > 1) & (np.abs(lab.h21 @ big.q.gamma2) > 1)
    sub = lab.subset(np.flatnonzero(keep))
    Dt, _ = value_derivatives(sub, names, big)
    p10, p11 = q.dims[:2]
    # with flat gates only the hinge of Q1* remains in the gamma1 block
    w1, _ = ipw_weights(sub, names, big)
    hinge = sub.h11 * (sub.h11 @ big.q.gamma1 > 0)[:, None]
    np.testing.assert_allclose(Dt[:, p10:p10 + p11], hinge * (1 - w1)[:, None], atol=1e-6)


def test_hard_limit(cont_cohort, bundle):
    lab, names = cont_cohort.labeled, cont_cohort.names
    q = bundle.q
    keep = (np.abs(lab.h11 @ q.gamma1) >= 0.01) & (np.abs(lab.h21 @ q.gamma2) >= 0.01)
    sub = lab.subset(np.flatnonzero(keep))
    gap = np.abs(smoothed_value(sub, names, bundle, h=1e-4) - sup_dr_scores(sub, names, bundle))
    assert gap.max() <= 1e-10


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_gradient_random_data(seed):
    c = gen_continuous(60, 0, seed=seed)
    lab = c.labeled
    try:
        b = ThetaBundle(fit_supervised_q(lab), fit_propensities(lab, c.names))
    except Exception:
        return
    analytic, numeric = _fd_check(lab, c.names, b)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1.0)
    assert rel.max() <= 1e-5


# ---------------------------------------------------------------- pipelines


def test_cv_deterministic(cont_cohort):
    a = crossvalidated_value(cont_cohort, "ssl-dr", make_imputer("be"), k_folds=3, seed=5)
    b = crossvalidated_value(cont_cohort, "ssl-dr", make_imputer("be"), k_folds=3, seed=5)
    assert a.estimate == b.estimate and a.se == b.se
    assert len(a.folds) == 3 and a.estimate == pytest.approx(np.mean([f["estimate"] for f in a.folds]))
    with pytest.raises(ValueError):
        crossvalidated_value(cont_cohort, "sup-dr", k_folds=1)


def test_evaluate_policy_reuses_fit(cont_cohort):
    fit = fit_pipeline(cont_cohort, "sup-dr")
    ev = evaluate_policy(cont_cohort, "sup-dr", fit.bundle.q)
    assert ev.estimate == pytest.approx(fit.value.estimate, abs=1e-12)
    assert ev.se > 0
    ssl = evaluate_policy(cont_cohort, "ssl-dr", fit.bundle.q, make_imputer("be"))
    assert np.isfinite(ssl.estimate)


@pytest.mark.slow
def test_cv_ssl_tracks_value_of_learned_policies():
    est, truth = [], []
    for rep in range(100):
        c = gen_continuous(135, 1272, seed=10_000 + rep)
        cv = crossvalidated_value(c, "ssl-dr", make_imputer("be"), seed=rep)
        est.append(cv.estimate)
        v = []
        for f in cv.folds:
            pol = Policy(np.array(f["gamma1"]), np.array(f["gamma2"]))
            d = draw("continuous", 100_000, policy=pol, rng=np.random.default_rng(rep))
            v.append((d["y2"] + d["y3"]).mean())
        truth.append(np.mean(v))
    diff = np.array(est) - np.array(truth)
    assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / np.sqrt(diff.size)
