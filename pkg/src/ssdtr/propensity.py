"""Logistic propensity models for the two treatment decisions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import Sample, unique_terms
from .regressors import LogisticFit, logistic_fit, logistic_information, sigmoid, solve_linear

POSITIVITY_EPS = 1e-3


class PositivityWarning(UserWarning):
    pass


def hcheck_layout(names: dict) -> tuple[list, list, list, list]:
    """Names and source positions of the stage-1 and stage-2 propensity designs.

    Stage 1 uses the distinct terms of ``(H10, H11)``; stage 2 prepends ``Y2`` to
    the distinct terms of ``(H20, H21)``.
    """
    n1, w1 = unique_terms(names["h10"], names["h11"])
    n2, w2 = unique_terms(names["h20"], names["h21"])
    return n1, w1, ["y2"] + n2, w2


def hcheck1(sample: Sample, names: dict) -> np.ndarray:
    _, w1, _, _ = hcheck_layout(names)
    blocks = (sample.h10, sample.h11)
    return np.column_stack([blocks[b][:, j] for b, j in w1])


def hcheck2(sample: Sample, names: dict, y2=None) -> np.ndarray:
    _, _, _, w2 = hcheck_layout(names)
    y2 = sample.y2 if y2 is None else y2
    if y2 is None:
        raise ValueError("stage-2 propensity design needs y2")
    blocks = (sample.h20, sample.h21)
    return np.column_stack([y2] + [blocks[b][:, j] for b, j in w2])


@dataclass(frozen=True)
class PropParams:
    xi1: np.ndarray
    xi2: np.ndarray
    fit1: LogisticFit | None = None
    fit2: LogisticFit | None = None

    @property
    def xi(self) -> np.ndarray:
        return np.concatenate([self.xi1, self.xi2])

    def replace(self, xi1=None, xi2=None) -> "PropParams":
        return PropParams(self.xi1 if xi1 is None else np.asarray(xi1, float),
                          self.xi2 if xi2 is None else np.asarray(xi2, float))


def predict_propensity(xi, h_check):
    """``sigmoid(h_check'xi)``; works for one row or a matrix of rows."""
    return sigmoid(np.asarray(h_check, float) @ np.asarray(xi, float))


def fit_propensity(labeled: Sample, names: dict, stage: int) -> LogisticFit:
    if stage == 1:
        H, a = hcheck1(labeled, names), labeled.a1
    elif stage == 2:
        H, a = hcheck2(labeled, names), labeled.a2
    else:
        raise ValueError("stage must be 1 or 2")
    fit = logistic_fit(H, a, name=f"stage-{stage} propensity")
    p = fit.predict_proba(H)
    if np.any(p < POSITIVITY_EPS) or np.any(p > 1 - POSITIVITY_EPS):
        warnings.warn(
            f"stage-{stage} fitted propensities reach [{p.min():.2g}, {p.max():.2g}]",
            PositivityWarning, stacklevel=2,
        )
    return fit


def fit_propensities(labeled: Sample, names: dict) -> PropParams:
    f1 = fit_propensity(labeled, names, 1)
    f2 = fit_propensity(labeled, names, 2)
    return PropParams(f1.coef, f2.coef, f1, f2)


def influence_xi(H, a, xi, fisher=None) -> np.ndarray:
    """Rows ``fisher^-1 H_i (a_i - sigmoid(H_i'xi))``."""
    H = np.asarray(H, float)
    if fisher is None:
        fisher = logistic_information(H, xi)
    score = H * (np.asarray(a, float) - sigmoid(H @ xi))[:, None]
    return solve_linear(fisher, score.T, name="propensity information").T


def influence_props(labeled: Sample, names: dict, prop: PropParams) -> np.ndarray:
    """Stacked stage-1 and stage-2 propensity influence, shape (n, dim xi)."""
    return np.hstack([
        influence_xi(hcheck1(labeled, names), labeled.a1, prop.xi1),
        influence_xi(hcheck2(labeled, names), labeled.a2, prop.xi2),
    ])
