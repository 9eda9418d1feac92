"""Supervised and semi-supervised two-stage Q-learning.

Working models::

    Q2 = Y2*beta21 + H20'beta22 + A2*H21'gamma2      (regression of Y3 on X2check)
    Q1 = H10'beta1 + A1*H11'gamma1                   (regression of the pseudo-outcome on X1)

``theta2`` is laid out as ``(beta21, beta22, gamma2)`` and ``theta1`` as
``(beta1, gamma1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Sample
from .imputation import QImputations
from .regressors import ols_fit, solve_linear


@dataclass(frozen=True)
class QParams:
    theta1: np.ndarray
    theta2: np.ndarray
    dims: tuple  # (p10, p11, p20, p21)
    method: str = "SUP"

    @property
    def beta1(self):
        return self.theta1[: self.dims[0]]

    @property
    def gamma1(self):
        return self.theta1[self.dims[0]:]

    @property
    def beta21(self) -> float:
        return float(self.theta2[0])

    @property
    def beta22(self):
        return self.theta2[1: 1 + self.dims[2]]

    @property
    def gamma2(self):
        return self.theta2[1 + self.dims[2]:]

    @property
    def theta2_minus(self):
        """Coefficients on X2, i.e. theta2 without beta21."""
        return self.theta2[1:]

    def replace(self, theta1=None, theta2=None) -> "QParams":
        return QParams(
            self.theta1 if theta1 is None else np.asarray(theta1, float),
            self.theta2 if theta2 is None else np.asarray(theta2, float),
            self.dims, self.method,
        )


def dims_of(sample: Sample) -> tuple:
    return (sample.h10.shape[1], sample.h11.shape[1], sample.h20.shape[1], sample.h21.shape[1])


def policy(h_t1, gamma_t) -> int:
    """Recommended action: 1 iff ``h_t1'gamma_t > 0``."""
    return int(float(np.dot(h_t1, gamma_t)) > 0)


def decide(H_t1, gamma_t) -> np.ndarray:
    return (np.asarray(H_t1, float) @ np.asarray(gamma_t, float) > 0).astype(float)


def q2_minus(q: QParams, h20, h21) -> np.ndarray:
    """Optimal stage-2 value without the ``Y2*beta21`` term."""
    return h20 @ q.beta22 + np.maximum(h21 @ q.gamma2, 0.0)


def q1_star(q: QParams, h10, h11) -> np.ndarray:
    return h10 @ q.beta1 + np.maximum(h11 @ q.gamma1, 0.0)


def pseudo_outcome(q: QParams, y2, h20, h21) -> np.ndarray:
    return y2 * (1.0 + q.beta21) + q2_minus(q, h20, h21)


def fit_supervised_q(labeled: Sample) -> QParams:
    """Least-squares Q-learning on the labeled rows."""
    dims = dims_of(labeled)
    theta2 = ols_fit(labeled.x2check, labeled.y3, name="stage-2 Q regression").coef
    q = QParams(np.zeros(dims[0] + dims[1]), theta2, dims, "SUP")
    ystar = pseudo_outcome(q, labeled.y2, labeled.h20, labeled.h21)
    theta1 = ols_fit(labeled.x1, ystar, name="stage-1 Q regression").coef
    return q.replace(theta1=theta1)


def ssl_stage2_system(unlabeled: Sample, mu: dict):
    """Matrix and right-hand side of the imputed stage-2 normal equations."""
    X2 = unlabeled.x2
    N = unlabeled.size
    m2, m3, m22, m23 = mu["y2"], mu["y3"], mu["y22"], mu["y23"]
    p = X2.shape[1] + 1
    A = np.empty((p, p))
    A[0, 0] = np.mean(m22)
    A[0, 1:] = A[1:, 0] = X2.T @ m2 / N
    A[1:, 1:] = X2.T @ X2 / N
    b = np.concatenate([[np.mean(m23)], X2.T @ m3 / N])
    return A, b


def fit_ssl_q(labeled: Sample, unlabeled: Sample, imp: QImputations) -> QParams:
    """Semi-supervised Q-learning from imputed unlabeled moments."""
    if unlabeled.size == 0:
        raise ValueError("semi-supervised fit needs unlabeled rows")
    dims = dims_of(labeled)
    mu = imp.unlabeled
    A, b = ssl_stage2_system(unlabeled, mu)
    theta2 = solve_linear(A, b, name="imputed stage-2 normal equations")
    q = QParams(np.zeros(dims[0] + dims[1]), theta2, dims, "SSL")
    ytilde = pseudo_outcome(q, mu["y2"], unlabeled.h20, unlabeled.h21)
    theta1 = ols_fit(unlabeled.x1, ytilde, name="imputed stage-1 Q regression").coef
    return q.replace(theta1=theta1)


def _stage1_derivative(x1, y2_like, h20, h21, q: QParams) -> np.ndarray:
    """Average of X1 times d(pseudo-outcome)/d(theta2)."""
    active = (h21 @ q.gamma2 > 0).astype(float)
    G = np.hstack([y2_like[:, None], h20, h21 * active[:, None]])
    return x1.T @ G / x1.shape[0]


def influence_q_ssl(labeled: Sample, unlabeled: Sample, q: QParams, imp: QImputations,
                    sigma2=None):
    """Per-labeled-row influence terms (psi1, psi2) of the SSL estimator.

    Imputations on labeled rows are the cross-fitted ones (fold-held-out
    predictions plus the refitting offsets).
    """
    mu = imp.labeled
    y2, y3 = labeled.y2, labeled.y3
    X2 = labeled.x2
    qlin = X2 @ q.theta2_minus
    b21 = q.beta21
    r2 = y2 - mu["y2"]
    first = (y2 * y3 - mu["y23"]) - b21 * (y2 * y2 - mu["y22"]) - qlin * r2
    rest = X2 * ((y3 - mu["y3"]) - b21 * r2)[:, None]
    psi2 = np.column_stack([first, rest])
    if sigma2 is None:
        sigma2 = labeled.x2check.T @ labeled.x2check / labeled.size
    infl2 = solve_linear(sigma2, psi2.T, name="stage-2 Gram").T
    D = _stage1_derivative(unlabeled.x1, imp.unlabeled["y2"], unlabeled.h20, unlabeled.h21, q)
    psi1 = labeled.x1 * ((1.0 + b21) * r2)[:, None] + infl2 @ D.T
    return psi1, psi2


def influence_q_sup(labeled: Sample, q: QParams, sigma2=None):
    """Per-row influence terms (psi1, psi2) of the supervised estimator."""
    Xc = labeled.x2check
    psi2 = Xc * (labeled.y3 - Xc @ q.theta2)[:, None]
    if sigma2 is None:
        sigma2 = Xc.T @ Xc / labeled.size
    infl2 = solve_linear(sigma2, psi2.T, name="stage-2 Gram").T
    ystar = pseudo_outcome(q, labeled.y2, labeled.h20, labeled.h21)
    D = _stage1_derivative(labeled.x1, labeled.y2, labeled.h20, labeled.h21, q)
    psi1 = labeled.x1 * (ystar - labeled.x1 @ q.theta1)[:, None] + infl2 @ D.T
    return psi1, psi2


@dataclass(frozen=True)
class QVariance:
    cov1: np.ndarray
    cov2: np.ndarray
    ase1: np.ndarray
    ase2: np.ndarray
    infl1: np.ndarray = field(repr=False)
    infl2: np.ndarray = field(repr=False)

    @property
    def ase(self) -> np.ndarray:
        return np.concatenate([self.ase1, self.ase2])

    @property
    def infl(self) -> np.ndarray:
        """Per-row influence of (theta1, theta2), shape (n, p1 + p2)."""
        return np.hstack([self.infl1, self.infl2])


def _sandwich(labeled: Sample, psi1, psi2) -> QVariance:
    n = labeled.size
    S1 = labeled.x1.T @ labeled.x1 / n
    S2 = labeled.x2check.T @ labeled.x2check / n
    infl1 = solve_linear(S1, psi1.T, name="stage-1 Gram").T
    infl2 = solve_linear(S2, psi2.T, name="stage-2 Gram").T
    V1 = infl1.T @ infl1 / n
    V2 = infl2.T @ infl2 / n
    cov1, cov2 = (V1 + V1.T) / 2 / n, (V2 + V2.T) / 2 / n
    return QVariance(cov1, cov2, np.sqrt(np.clip(np.diag(cov1), 0, None)),
                     np.sqrt(np.clip(np.diag(cov2), 0, None)), infl1, infl2)


def variance_ssl_q(labeled: Sample, unlabeled: Sample, q: QParams, imp: QImputations) -> QVariance:
    """Sandwich variance from the cross-fitted influence terms."""
    psi1, psi2 = influence_q_ssl(labeled, unlabeled, q, imp)
    return _sandwich(labeled, psi1, psi2)


def variance_sup_q(labeled: Sample, q: QParams) -> QVariance:
    psi1, psi2 = influence_q_sup(labeled, q)
    return _sandwich(labeled, psi1, psi2)


def param_names(names: dict) -> tuple[list[str], list[str]]:
    """Readable coefficient labels for theta1 and theta2."""
    n1 = [f"beta1[{t}]" for t in names["h10"]] + [f"gamma1[{t}]" for t in names["h11"]]
    n2 = (["beta21[y2]"] + [f"beta22[{t}]" for t in names["h20"]]
          + [f"gamma2[{t}]" for t in names["h21"]])
    return n1, n2
