"""Policy value estimation: Q plug-in, supervised and semi-supervised doubly robust.

The augmented per-row score on labeled data is::

    V = Q1* + w1 * (Y2 - Q1* + Q2*) + w2 * (Y3 - Q2*)

with ``Q2* = beta21*Y2 + Q2-``. Standard errors use influence functions in which
the uncertainty of the fitted parameters is propagated through derivatives of
a smoothed version of ``V`` (indicators replaced by ``sigmoid(x / h)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Cohort, FoldAssignment, Sample, partition_folds
from .imputation import ValueImputations, impute_q, impute_value, refit_value
from .imputation import Crossfit, v_targets
from .propensity import PropParams, fit_propensities, hcheck1, hcheck2, influence_props
from .regressors import sigmoid
from .ssq import (QParams, decide, dims_of, fit_ssl_q, fit_supervised_q, q1_star, q2_minus,
                  variance_ssl_q, variance_sup_q)

METHODS = ("q-plugin", "sup-dr", "ssl-dr")


class DegeneratePropensityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ThetaBundle:
    q: QParams
    prop: PropParams


@dataclass(frozen=True)
class ValueEstimate:
    method: str
    estimate: float
    se: float
    n: int
    N: int
    h: float | None = None
    warnings: list = field(default_factory=list)
    psi: np.ndarray | None = field(default=None, repr=False)
    folds: list | None = None

    def to_json(self) -> dict:
        out = {
            "method": self.method, "estimate": self.estimate, "se": self.se,
            "n": self.n, "N": self.N, "h": self.h, "warnings": list(self.warnings),
        }
        if self.folds is not None:
            out["folds"] = self.folds
        return out


def _check_pi(p, stage):
    if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p >= 1):
        raise DegeneratePropensityError(f"stage-{stage} propensity outside (0, 1)")


def _arm_factor(a, d, p):
    return d * a / p + (1 - d) * (1 - a) / (1 - p)


def ipw_weights(sample: Sample, names: dict, bundle: ThetaBundle, stage2: bool = True):
    """Hard-indicator weights ``(w1, w2)``; ``w2`` needs observed ``Y2``."""
    q, prop = bundle.q, bundle.prop
    p1 = sigmoid(hcheck1(sample, names) @ prop.xi1)
    _check_pi(p1, 1)
    w1 = _arm_factor(sample.a1, decide(sample.h11, q.gamma1), p1)
    if not stage2:
        return w1, None
    p2 = sigmoid(hcheck2(sample, names) @ prop.xi2)
    _check_pi(p2, 2)
    w2 = w1 * _arm_factor(sample.a2, decide(sample.h21, q.gamma2), p2)
    return w1, w2


def ipw_weights_row(d1, a1, pi1, d2, a2, pi2) -> tuple[float, float]:
    for p in (pi1, pi2):
        if not 0 < p < 1:
            raise DegeneratePropensityError("propensity outside (0, 1)")
    w1 = _arm_factor(a1, d1, pi1)
    return float(w1), float(w1 * _arm_factor(a2, d2, pi2))


def sup_dr_scores(sample: Sample, names: dict, bundle: ThetaBundle) -> np.ndarray:
    q = bundle.q
    w1, w2 = ipw_weights(sample, names, bundle)
    q1 = q1_star(q, sample.h10, sample.h11)
    q2 = q.beta21 * sample.y2 + q2_minus(q, sample.h20, sample.h21)
    return q1 + w1 * (sample.y2 - q1 + q2) + w2 * (sample.y3 - q2)


def ssl_dr_scores(sample: Sample, names: dict, bundle: ThetaBundle, mu: dict) -> np.ndarray:
    """Per-row semi-supervised scores given value imputations ``mu`` on ``sample``."""
    q = bundle.q
    w1, _ = ipw_weights(sample, names, bundle, stage2=False)
    q1 = q1_star(q, sample.h10, sample.h11)
    q2m = q2_minus(q, sample.h20, sample.h21)
    b21 = q.beta21
    return (q1 + w1 * ((1 + b21) * mu["v2"] - q1 + q2m)
            + mu["w2y3"] - b21 * mu["w2y2"] - q2m * mu["w2"])


def value_q_plugin(q: QParams, sample: Sample) -> ValueEstimate:
    """Mean of ``Q1*`` with a naive SE that ignores the fit of ``theta1``."""
    s = q1_star(q, sample.h10, sample.h11)
    m = s.size
    se = float(np.std(s, ddof=1) / np.sqrt(m)) if m > 1 else float("nan")
    return ValueEstimate("q-plugin", float(np.mean(s)), se, m, 0,
                         warnings=["naive standard error: ignores estimation of theta1"])


# ---------------------------------------------------------------- smoothing


def smoothed_gate(x, h: float = 1.0):
    if not h > 0:
        raise ValueError("bandwidth h must be positive")
    return sigmoid(np.asarray(x, float) / h)


def smoothed_weights(a1, lin1, pi1, a2, lin2, pi2, h: float = 1.0):
    """Smoothed weights with gates ``sigmoid(H_t1'gamma_t / h)``."""
    g1, g2 = smoothed_gate(lin1, h), smoothed_gate(lin2, h)
    w1 = a1 * g1 / pi1 + (1 - a1) * (1 - g1) / (1 - pi1)
    return w1, w1 * (a2 * g2 / pi2 + (1 - a2) * (1 - g2) / (1 - pi2))


def pack(bundle: ThetaBundle) -> np.ndarray:
    return np.concatenate([bundle.q.theta1, bundle.q.theta2, bundle.prop.xi1, bundle.prop.xi2])


def unpack(vec, like: ThetaBundle) -> ThetaBundle:
    q, p = like.q, like.prop
    sizes = np.cumsum([q.theta1.size, q.theta2.size, p.xi1.size])
    t1, t2, x1, x2 = np.split(np.asarray(vec, float), sizes)
    return ThetaBundle(q.replace(t1, t2), p.replace(x1, x2))


@dataclass(frozen=True)
class _RowParts:
    q1: np.ndarray
    q2: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    H1: np.ndarray
    H2: np.ndarray


def _parts(sample: Sample, names: dict, bundle: ThetaBundle, h: float) -> _RowParts:
    q, prop = bundle.q, bundle.prop
    H1, H2 = hcheck1(sample, names), hcheck2(sample, names)
    p1, p2 = sigmoid(H1 @ prop.xi1), sigmoid(H2 @ prop.xi2)
    _check_pi(p1, 1)
    _check_pi(p2, 2)
    g1 = smoothed_gate(sample.h11 @ q.gamma1, h)
    g2 = smoothed_gate(sample.h21 @ q.gamma2, h)
    a1, a2 = sample.a1, sample.a2
    r1 = a1 * g1 / p1 + (1 - a1) * (1 - g1) / (1 - p1)
    r2 = a2 * g2 / p2 + (1 - a2) * (1 - g2) / (1 - p2)
    q1 = q1_star(q, sample.h10, sample.h11)
    q2 = q.beta21 * sample.y2 + q2_minus(q, sample.h20, sample.h21)
    return _RowParts(q1, q2, g1, g2, p1, p2, r1, r2, r1, r1 * r2, H1, H2)


def smoothed_value(sample: Sample, names: dict, bundle: ThetaBundle, h: float = 1.0) -> np.ndarray:
    """Per-row augmented score with smoothed weights."""
    P = _parts(sample, names, bundle, h)
    return P.q1 + P.w1 * (sample.y2 - P.q1 + P.q2) + P.w2 * (sample.y3 - P.q2)


def value_derivatives(sample: Sample, names: dict, bundle: ThetaBundle, h: float = 1.0):
    """Per-row gradients of :func:`smoothed_value` in ``theta`` and ``xi``.

    Returns arrays of shape ``(rows, dim theta)`` and ``(rows, dim xi)``; the
    hinge terms of ``Q1*`` and ``Q2*`` contribute their almost-everywhere
    derivative.
    """
    q = bundle.q
    P = _parts(sample, names, bundle, h)
    m = sample.size
    y2, y3, a1, a2 = sample.y2, sample.y3, sample.a1, sample.a2
    p10, p11, p20, p21 = q.dims
    n1 = p10 + p11
    n2 = 1 + p20 + p21

    dq1 = np.zeros((m, n1 + n2))
    dq1[:, :p10] = sample.h10
    dq1[:, p10:n1] = sample.h11 * (sample.h11 @ q.gamma1 > 0)[:, None]
    dq2 = np.zeros((m, n1 + n2))
    dq2[:, n1] = y2
    dq2[:, n1 + 1:n1 + 1 + p20] = sample.h20
    dq2[:, n1 + 1 + p20:] = sample.h21 * (sample.h21 @ q.gamma2 > 0)[:, None]

    # gate derivatives
    c1 = P.g1 * (1 - P.g1) / h * (a1 / P.p1 - (1 - a1) / (1 - P.p1))
    c2 = P.g2 * (1 - P.g2) / h * (a2 / P.p2 - (1 - a2) / (1 - P.p2))
    dw1 = np.zeros((m, n1 + n2))
    dw1[:, p10:n1] = sample.h11 * c1[:, None]
    dr2 = np.zeros((m, n1 + n2))
    dr2[:, n1 + 1 + p20:] = sample.h21 * c2[:, None]
    dw2 = dw1 * P.r2[:, None] + P.r1[:, None] * dr2

    e1 = y2 - P.q1 + P.q2
    e2 = y3 - P.q2
    d_theta = (dq1 + dw1 * e1[:, None] + P.w1[:, None] * (dq2 - dq1)
               + dw2 * e2[:, None] - P.w2[:, None] * dq2)

    def varpi(H, g, a, p):
        return H * (-g * a * (1 - p) / p + (1 - g) * (1 - a) * p / (1 - p))[:, None]

    v1 = varpi(P.H1, P.g1, a1, P.p1)
    v2 = varpi(P.H2, P.g2, a2, P.p2)
    d_xi1 = v1 * e1[:, None] + v1 * (P.r2 * e2)[:, None]
    d_xi2 = (P.r1 * e2)[:, None] * v2
    return d_theta, np.hstack([d_xi1, d_xi2])


# ---------------------------------------------------------------- estimators


def _finish(method, scores_mean, psi, n, N, h, warns):
    psi = np.asarray(psi, float)
    sigma2 = float(np.mean(psi ** 2))
    return ValueEstimate(method, float(scores_mean), float(np.sqrt(sigma2 / n)), n, N, h,
                         list(warns), psi)


def value_sup_dr(labeled: Sample, names: dict, bundle: ThetaBundle, theta_infl,
                 xi_infl=None, h: float = 1.0) -> ValueEstimate:
    """Supervised doubly robust value.

    ``theta_infl`` holds per-row influence values of ``(theta1, theta2)`` from
    the supervised fit.
    """
    scores = sup_dr_scores(labeled, names, bundle)
    if xi_infl is None:
        xi_infl = influence_props(labeled, names, bundle.prop)
    Dt, Dx = value_derivatives(labeled, names, bundle, h)
    psi = scores - scores.mean() + theta_infl @ Dt.mean(0) + xi_infl @ Dx.mean(0)
    return _finish("sup-dr", scores.mean(), psi, labeled.size, 0, h, [])


def ssl_nu(labeled: Sample, names: dict, bundle: ThetaBundle, vimp: ValueImputations) -> np.ndarray:
    """Imputation part of the semi-supervised influence, on labeled rows."""
    q = bundle.q
    w1, w2 = ipw_weights(labeled, names, bundle)
    mu = vimp.labeled
    y2, y3 = labeled.y2, labeled.y3
    q2m = q2_minus(q, labeled.h20, labeled.h21)
    b21 = q.beta21
    return (w1 * (1 + b21) * (y2 - mu["v2"]) + w2 * y3 - mu["w2y3"]
            - b21 * (w2 * y2 - mu["w2y2"]) - q2m * (w2 - mu["w2"]))


def value_ssl_dr(labeled: Sample, unlabeled: Sample, names: dict, bundle: ThetaBundle,
                 vimp: ValueImputations, theta_infl, xi_infl=None,
                 h: float = 1.0) -> ValueEstimate:
    """Semi-supervised doubly robust value averaged over the unlabeled rows."""
    if unlabeled.size == 0:
        raise ValueError("semi-supervised value needs unlabeled rows")
    for key in ("v2", "w2", "w2y2", "w2y3"):
        if key not in vimp.unlabeled or vimp.unlabeled[key].shape[0] != unlabeled.size:
            raise ValueError(f"missing value imputation {key!r} for unlabeled rows")
    scores = ssl_dr_scores(unlabeled, names, bundle, vimp.unlabeled)
    if xi_infl is None:
        xi_infl = influence_props(labeled, names, bundle.prop)
    Dt, Dx = value_derivatives(labeled, names, bundle, h)
    psi = ssl_nu(labeled, names, bundle, vimp) + theta_infl @ Dt.mean(0) + xi_infl @ Dx.mean(0)
    return _finish("ssl-dr", scores.mean(), psi, labeled.size, unlabeled.size, h, [])


def variance_value(psi) -> float:
    """Standard error ``sqrt(mean(psi^2) / n)`` from per-row influence values."""
    psi = np.asarray(psi, float)
    return float(np.sqrt(np.mean(psi ** 2) / psi.size))


# ---------------------------------------------------------------- pipelines


@dataclass(frozen=True)
class Fitted:
    """Everything produced by one end-to-end fit."""

    method: str
    bundle: ThetaBundle
    qvar: object
    qimp: object = None
    vimp: ValueImputations | None = None
    value: ValueEstimate | None = None
    folds: FoldAssignment | None = None


def fit_pipeline(cohort: Cohort, method: str, imputer=None, k_folds: int = 5, seed=0,
                 h: float = 1.0) -> Fitted:
    """Fit Q-functions, propensities and the value for one method.

    ``method`` is ``"sup"``/``"sup-dr"``/``"q-plugin"`` (supervised Q-learning)
    or ``"ssl"``/``"ssl-dr"`` (semi-supervised).
    """
    lab, unl, names = cohort.labeled, cohort.unlabeled, cohort.names
    if method in ("sup", "sup-dr", "q-plugin"):
        q = fit_supervised_q(lab)
        qvar = variance_sup_q(lab, q)
        prop = fit_propensities(lab, names)
        bundle = ThetaBundle(q, prop)
        if method == "q-plugin":
            pool = lab if unl.size == 0 else unl
            val = value_q_plugin(q, pool)
        else:
            val = value_sup_dr(lab, names, bundle, qvar.infl, h=h)
        return Fitted(method, bundle, qvar, value=val)
    if method not in ("ssl", "ssl-dr"):
        raise ValueError(f"unknown method {method!r}")
    if imputer is None:
        raise ValueError("semi-supervised fit needs an imputer")
    folds = partition_folds(lab.size, k_folds, seed)
    qimp = impute_q(lab, unl, names, folds, imputer)
    q = fit_ssl_q(lab, unl, qimp)
    qvar = variance_ssl_q(lab, unl, q, qimp)
    prop = fit_propensities(lab, names)
    bundle = ThetaBundle(q, prop)
    w1, w2 = ipw_weights(lab, names, bundle)
    q2m = q2_minus(q, lab.h20, lab.h21)
    vimp = impute_value(lab, unl, folds, imputer, w1, w2, q2m, reuse=qimp.raw)
    val = value_ssl_dr(lab, unl, names, bundle, vimp, qvar.infl, h=h)
    return Fitted(method, bundle, qvar, qimp, vimp, val, folds)


def _fold_split(m: int, k: int, rng) -> np.ndarray:
    return np.arange(m)[rng.permutation(m)] % k if m else np.zeros(0, int)


def crossvalidated_value(cohort: Cohort, method: str, imputer=None, k_folds: int = 5,
                         seed=0, h: float = 1.0, inner_folds: int = 5) -> ValueEstimate:
    """K-fold cross-validated value of the policy learned by ``method``.

    For each fold the whole pipeline is fitted on the remaining rows (labeled
    and unlabeled) and the value of the resulting policy is estimated on the
    held-out rows. For ``ssl-dr`` the held-out value imputations use models
    trained on the training labeled rows, with refitting offsets solved on the
    held-out labeled rows. The standard error pools held-out influence values.
    """
    if k_folds < 2:
        raise ValueError("cross-validation needs k_folds >= 2")
    rng = np.random.default_rng(seed)
    lab, unl, names = cohort.labeled, cohort.unlabeled, cohort.names
    fl = _fold_split(lab.size, k_folds, rng)
    fu = _fold_split(unl.size, k_folds, rng)
    ests, psis, per_fold = [], [], []
    for k in range(k_folds):
        tr_l, te_l = np.flatnonzero(fl != k), np.flatnonzero(fl == k)
        tr_u, te_u = np.flatnonzero(fu != k), np.flatnonzero(fu == k)
        if te_l.size < 2 or tr_l.size < 2:
            raise ValueError(f"fold {k} is too small to fit")
        train = Cohort(lab.subset(tr_l), unl.subset(tr_u), cohort.schema, cohort.basis)
        hold_l, hold_u = lab.subset(te_l), unl.subset(te_u)
        fit = fit_pipeline(train, method, imputer, min(inner_folds, tr_l.size), seed + 1 + k, h)
        b = fit.bundle
        if method == "q-plugin":
            pool = hold_u if hold_u.size else hold_l
            s = q1_star(b.q, pool.h10, pool.h11)
            est, psi = float(s.mean()), s - s.mean()
        elif method == "sup-dr":
            s = sup_dr_scores(hold_l, names, b)
            est, psi = float(s.mean()), s - s.mean()
        elif method == "ssl-dr":
            if hold_u.size == 0:
                raise ValueError(f"fold {k} has no unlabeled rows")
            w1, w2 = ipw_weights(hold_l, names, b)
            q2m = q2_minus(b.q, hold_l.h20, hold_l.h21)
            trl = train.labeled
            tw1, tw2 = ipw_weights(trl, names, b)
            t_tr = v_targets(trl.y2, trl.y3, tw2)
            raw = {}
            for key, y in t_tr.items():
                imp_k = imputer.bind(key, trl.u, y) if hasattr(imputer, "bind") else imputer
                model = imp_k.fit(trl.u, y, target=key)
                both = model.predict(np.vstack([hold_l.u, hold_u.u]))
                raw[key] = Crossfit(key, both[:te_l.size], both[te_l.size:],
                                    both[None, te_l.size:])
            vimp = refit_value(hold_l.y2, hold_l.y3, w1, w2, q2m, raw, fit.folds)
            s = ssl_dr_scores(hold_u, names, b, vimp.unlabeled)
            est = float(s.mean())
            psi = ssl_nu(hold_l, names, b, vimp)
        else:
            raise ValueError(f"unknown method {method!r}")
        ests.append(est)
        psis.append(psi)
        per_fold.append({"fold": k, "estimate": est, "n": int(te_l.size), "N": int(te_u.size),
                         "gamma1": b.q.gamma1.tolist(), "gamma2": b.q.gamma2.tolist()})
    psi = np.concatenate(psis)
    return ValueEstimate(method, float(np.mean(ests)), variance_value(psi), lab.size, unl.size,
                         h, ["cross-validated"], psi, per_fold)


def evaluate_policy(cohort: Cohort, method: str, q: QParams, imputer=None, k_folds: int = 5,
                    seed=0, h: float = 1.0) -> ValueEstimate:
    """Value of a regime whose Q-parameters were estimated elsewhere.

    ``q`` is held fixed, so only the propensity fit adds to the influence
    values; propensities are refitted on the labeled rows of ``cohort``.
    """
    lab, unl, names = cohort.labeled, cohort.unlabeled, cohort.names
    if q.dims != dims_of(lab):
        raise ValueError(f"Q-parameter layout {q.dims} does not match the data {dims_of(lab)}")
    if method == "q-plugin":
        return value_q_plugin(q, lab if unl.size == 0 else unl)
    bundle = ThetaBundle(q, fit_propensities(lab, names))
    zero = np.zeros((lab.size, q.theta1.size + q.theta2.size))
    if method == "sup-dr":
        return value_sup_dr(lab, names, bundle, zero, h=h)
    if method != "ssl-dr":
        raise ValueError(f"unknown method {method!r}")
    if imputer is None:
        raise ValueError("semi-supervised value needs an imputer")
    folds = partition_folds(lab.size, k_folds, seed)
    w1, w2 = ipw_weights(lab, names, bundle)
    vimp = impute_value(lab, unl, folds, imputer, w1, w2, q2_minus(q, lab.h20, lab.h21))
    return value_ssl_dr(lab, unl, names, bundle, vimp, zero, h=h)
