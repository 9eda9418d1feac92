"""Cross-fitted imputation with linear refitting offsets.

Q-learning targets are ``Y2``, ``Y3``, ``Y2^2`` and ``Y2*Y3``; value targets are
``Y2``, ``w2``, ``w2*Y2`` and ``w2*Y3`` where ``w2`` is the stage-2 inverse
probability weight. Each is predicted on held-out labeled folds and on every
unlabeled row, then shifted by offsets chosen so that fixed empirical moment
equations hold exactly on the labeled data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataset import FoldAssignment, Sample, unique_terms
from .regressors import ols_fit

Q_TARGETS = ("y2", "y3", "y22", "y23")
V_TARGETS = ("v2", "w2", "w2y2", "w2y3")


class DegenerateWeightError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Crossfit:
    """Predictions of one target.

    ``labeled[i]`` comes from the model trained without row ``i``'s fold;
    ``unlabeled`` averages the ``K`` fold models.
    """

    target: str
    labeled: np.ndarray
    unlabeled: np.ndarray
    by_fold: np.ndarray


def crossfit_predict(U_lab, y, U_unl, folds: FoldAssignment, imputer, target: str) -> Crossfit:
    U_lab = np.asarray(U_lab, dtype=float)
    U_unl = np.asarray(U_unl, dtype=float)
    y = np.asarray(y, dtype=float)
    if hasattr(imputer, "bind"):
        imputer = imputer.bind(target, U_lab, y)
    K = folds.k_folds
    lab = np.empty(y.shape[0])
    by_fold = np.empty((K, U_unl.shape[0]))
    for k in range(K):
        test = folds.indices(k)
        train = folds.complement(k)
        model = imputer.fit(U_lab[train], y[train], target=target)
        if U_unl.shape[0]:
            both = model.predict(np.vstack([U_lab[test], U_unl]))
            lab[test] = both[: test.size]
            by_fold[k] = both[test.size:]
        else:
            lab[test] = model.predict(U_lab[test])
    return Crossfit(target, lab, by_fold.mean(axis=0), by_fold)


def q_targets(sample: Sample) -> dict[str, np.ndarray]:
    y2, y3 = sample.y2, sample.y3
    return {"y2": y2, "y3": y3, "y22": y2 * y2, "y23": y2 * y3}


def xbar_design(sample: Sample, names: Mapping[str, list]) -> np.ndarray:
    """``(1, X1, X2)`` with duplicated functions kept once."""
    _, where = unique_terms(["1"], names["x1"], names["x2"])
    blocks = (np.ones((sample.size, 1)), sample.x1, sample.x2)
    return np.column_stack([blocks[b][:, j] for b, j in where])


@dataclass(frozen=True)
class QImputations:
    eta2: np.ndarray
    eta22: float
    eta3: np.ndarray
    eta23: float
    raw: Mapping[str, Crossfit]
    labeled: Mapping[str, np.ndarray]
    unlabeled: Mapping[str, np.ndarray]
    folds: FoldAssignment


def refit_q(labeled: Sample, unlabeled: Sample, names, raw: Mapping[str, Crossfit],
            folds: FoldAssignment) -> QImputations:
    """Solve the refitting equations and assemble the final imputations."""
    t = q_targets(labeled)
    Xb = xbar_design(labeled, names)
    eta2 = ols_fit(Xb, t["y2"] - raw["y2"].labeled, name="refit of Y2 on (1, X1, X2)").coef
    eta3 = ols_fit(labeled.x2, t["y3"] - raw["y3"].labeled, name="refit of Y3 on X2").coef
    eta22 = float(np.mean(t["y22"] - raw["y22"].labeled))
    eta23 = float(np.mean(t["y23"] - raw["y23"].labeled))

    def offsets(s: Sample):
        return {
            "y2": xbar_design(s, names) @ eta2,
            "y3": s.x2 @ eta3,
            "y22": np.full(s.size, eta22),
            "y23": np.full(s.size, eta23),
        }

    off_l = offsets(labeled)
    off_u = offsets(unlabeled)
    return QImputations(
        eta2=eta2, eta22=eta22, eta3=eta3, eta23=eta23, raw=dict(raw),
        labeled={s: raw[s].labeled + off_l[s] for s in Q_TARGETS},
        unlabeled={s: raw[s].unlabeled + off_u[s] for s in Q_TARGETS},
        folds=folds,
    )


def q_refit_moments(labeled: Sample, names, imp: QImputations) -> dict[str, np.ndarray]:
    """Left-hand sides of the four refitting equations (zero at the fit)."""
    t = q_targets(labeled)
    Xb = xbar_design(labeled, names)
    return {
        "y2": Xb.T @ (t["y2"] - imp.labeled["y2"]),
        "y3": labeled.x2.T @ (t["y3"] - imp.labeled["y3"]),
        "y22": np.atleast_1d(np.sum(t["y22"] - imp.labeled["y22"])),
        "y23": np.atleast_1d(np.sum(t["y23"] - imp.labeled["y23"])),
    }


def impute_q(labeled: Sample, unlabeled: Sample, names, folds: FoldAssignment,
             imputer) -> QImputations:
    t = q_targets(labeled)
    raw = {
        s: crossfit_predict(labeled.u, t[s], unlabeled.u, folds, imputer, s)
        for s in Q_TARGETS
    }
    return refit_q(labeled, unlabeled, names, raw, folds)


@dataclass(frozen=True)
class ValueImputations:
    eta2v: float
    eta_w2v: float
    eta_2w2v: float
    eta_3w2v: float
    raw: Mapping[str, Crossfit]
    labeled: Mapping[str, np.ndarray]
    unlabeled: Mapping[str, np.ndarray]
    folds: FoldAssignment


def v_targets(y2, y3, w2) -> dict[str, np.ndarray]:
    return {"v2": y2, "w2": w2, "w2y2": w2 * y2, "w2y3": w2 * y3}


def refit_value(y2, y3, w1, w2, q2minus, raw: Mapping[str, Crossfit],
                folds: FoldAssignment) -> ValueImputations:
    """Scalar refitting offsets for the value targets.

    ``w1``, ``w2`` and ``q2minus`` are evaluated on the labeled rows at the
    fitted parameters.
    """
    t = v_targets(np.asarray(y2, float), np.asarray(y3, float), np.asarray(w2, float))
    w1 = np.asarray(w1, dtype=float)
    q2minus = np.asarray(q2minus, dtype=float)
    n = w1.size
    s1, sq = float(np.sum(w1)), float(np.sum(q2minus))
    if abs(s1) <= 1e-12 * n:
        raise DegenerateWeightError("sum of stage-1 weights is numerically zero")
    if abs(sq) <= 1e-12 * max(1.0, float(np.sum(np.abs(q2minus)))):
        raise DegenerateWeightError("sum of stage-2 blip-free Q values is numerically zero")
    eta = {
        "v2": float(np.sum(w1 * (t["v2"] - raw["v2"].labeled)) / s1),
        "w2": float(np.sum(q2minus * (t["w2"] - raw["w2"].labeled)) / sq),
        "w2y2": float(np.mean(t["w2y2"] - raw["w2y2"].labeled)),
        "w2y3": float(np.mean(t["w2y3"] - raw["w2y3"].labeled)),
    }
    return ValueImputations(
        eta2v=eta["v2"], eta_w2v=eta["w2"], eta_2w2v=eta["w2y2"], eta_3w2v=eta["w2y3"],
        raw=dict(raw),
        labeled={s: raw[s].labeled + eta[s] for s in V_TARGETS},
        unlabeled={s: raw[s].unlabeled + eta[s] for s in V_TARGETS},
        folds=folds,
    )


def value_refit_moments(y2, y3, w1, w2, q2minus, imp: ValueImputations) -> dict[str, float]:
    t = v_targets(np.asarray(y2, float), np.asarray(y3, float), np.asarray(w2, float))
    return {
        "v2": float(np.sum(w1 * (t["v2"] - imp.labeled["v2"]))),
        "w2": float(np.sum(q2minus * (t["w2"] - imp.labeled["w2"]))),
        "w2y2": float(np.sum(t["w2y2"] - imp.labeled["w2y2"])),
        "w2y3": float(np.sum(t["w2y3"] - imp.labeled["w2y3"])),
    }


def impute_value(labeled: Sample, unlabeled: Sample, folds: FoldAssignment, imputer,
                 w1, w2, q2minus, reuse: Mapping[str, Crossfit] | None = None) -> ValueImputations:
    """Cross-fit and refit the value targets.

    ``reuse`` may supply an existing cross-fit of ``Y2`` (same folds and imputer)
    under key ``"y2"``; its raw predictions are shared with the value target.
    """
    t = v_targets(labeled.y2, labeled.y3, np.asarray(w2, float))
    raw = {}
    for s in V_TARGETS:
        if s == "v2" and reuse is not None and "y2" in reuse:
            c = reuse["y2"]
            raw[s] = Crossfit("v2", c.labeled, c.unlabeled, c.by_fold)
        else:
            raw[s] = crossfit_predict(labeled.u, t[s], unlabeled.u, folds, imputer, s)
    return refit_value(labeled.y2, labeled.y3, w1, w2, q2minus, raw, folds)
