"""Numeric backends: linear solves, OLS, logistic MLE, splines and forests.

Imputers share a two-step interface: ``imputer.fit(U, y, target)`` returns a
fitted model with a ``predict(U)`` method.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import scipy.linalg
from numba import njit

RCOND_MIN = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    """A linear system is singular or too ill-conditioned to solve."""


class SeparationError(RuntimeError):
    """Logistic likelihood has no finite maximiser (perfect separation)."""


class ConvergenceError(RuntimeError):
    pass


def solve_linear(A, b, name: str = "linear system") -> np.ndarray:
    """Solve ``A x = b`` by pivoted LU, refusing ill-conditioned systems."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name}: matrix must be square, got {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"{name}: rhs has {b.shape[0]} rows, matrix {A.shape[0]}")
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise SingularSystemError(f"{name}: non-finite entries")
    if A.shape[0] == 0:
        return np.zeros(b.shape)
    # equilibrate so the condition estimate ignores column scaling
    s = np.sqrt(np.abs(np.diag(A)))
    s[s == 0] = 1.0
    As = A / s[:, None] / s[None, :]
    with warnings.catch_warnings():
        # singularity is reported below with the system's name
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(As, check_finite=False)
    if np.any(np.diag(lu) == 0):
        raise SingularSystemError(f"{name}: exactly singular")
    anorm = np.linalg.norm(As, 1)
    rcond = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")[0]
    if not rcond >= RCOND_MIN:
        raise SingularSystemError(
            f"{name}: reciprocal condition number {rcond:.3g} below {RCOND_MIN:g}"
        )
    bs = b / s if b.ndim == 1 else b / s[:, None]
    x = scipy.linalg.lu_solve((lu, piv), bs, check_finite=False)
    return x / s if x.ndim == 1 else x / s[:, None]


@dataclass(frozen=True)
class LinearFit:
    coef: np.ndarray
    gram: np.ndarray
    n_used: int

    def predict(self, design):
        return np.asarray(design, dtype=float) @ self.coef


def ols_fit(design, y, name: str = "OLS") -> LinearFit:
    """Least squares through the normal equations."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"{name}: design {X.shape} does not match y {y.shape}")
    n = X.shape[0]
    gram = X.T @ X / n
    coef = solve_linear(gram, X.T @ y / n, name=name)
    return LinearFit(coef=coef, gram=gram, n_used=n)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def _loglik(eta, a):
    # sum of a*eta - log(1+exp(eta)), stable
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    converged: bool
    iterations: int
    final_score_norm: float

    def predict_proba(self, design):
        return sigmoid(np.asarray(design, dtype=float) @ self.coef)


def logistic_fit(design, a, tol: float = 1e-8, max_iter: int = 100,
                 eta_bound: float = 36.0, name: str = "logistic") -> LogisticFit:
    """Newton-Raphson maximum likelihood with step halving.

    Convergence is declared when the max-norm of the score
    ``design'(a - sigmoid(design @ coef))`` falls below ``tol``. A linear
    predictor exceeding ``eta_bound`` in magnitude, or a fit that classifies
    every row correctly, signals separation.
    """
    X = np.asarray(design, dtype=float)
    a = np.asarray(a, dtype=float)
    if X.ndim != 2 or X.shape[0] != a.shape[0]:
        raise ValueError(f"{name}: design {X.shape} does not match response {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name}: response must be binary")
    if a.min() == a.max():
        raise ValueError(f"{name}: response has a single class")
    coef = np.zeros(X.shape[1])
    eta = X @ coef
    ll = _loglik(eta, a)
    score = X.T @ (a - sigmoid(eta))
    snorm = float(np.max(np.abs(score)))
    it = 0
    while snorm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"{name}: no convergence after {max_iter} iterations (score {snorm:.3g})"
            )
        it += 1
        p = sigmoid(eta)
        info = (X * (p * (1 - p))[:, None]).T @ X
        try:
            step = solve_linear(info, score, name=f"{name} information")
        except SingularSystemError as e:
            raise SeparationError(f"{name}: information matrix degenerate ({e})") from None
        t = 1.0
        for _ in range(60):
            cand = coef + t * step
            eta_c = X @ cand
            ll_c = _loglik(eta_c, a)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        coef, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(eta)) > eta_bound:
            raise SeparationError(
                f"{name}: fitted linear predictor diverging (|eta| > {eta_bound}); "
                "the classes appear separated"
            )
        score = X.T @ (a - sigmoid(eta))
        snorm = float(np.max(np.abs(score)))
    # a finite MLE cannot classify every row correctly; if it seems to, the
    # score fell below tol only because the coefficients ran off to infinity
    if np.all((eta > 0) == (a == 1)) and np.all(eta != 0):
        raise SeparationError(f"{name}: the classes are linearly separated")
    return LogisticFit(coef=coef, converged=True, iterations=it, final_score_norm=snorm)


def logistic_information(design, coef) -> np.ndarray:
    """Average Fisher information ``n^-1 sum H H' p (1-p)``."""
    X = np.asarray(design, dtype=float)
    p = sigmoid(X @ coef)
    return (X * (p * (1 - p))[:, None]).T @ X / X.shape[0]


def spline_basis(x, knots) -> np.ndarray:
    """Cubic truncated-power basis ``x, x^2, x^3, (x-k1)_+^3, (x-k2)_+^3``."""
    x = np.asarray(x, dtype=float).ravel()
    knots = np.asarray(knots, dtype=float).ravel()
    if not np.all(np.isfinite(knots)):
        raise ValueError("knots must be finite")
    if np.any(np.diff(knots) <= 0):
        raise ValueError(f"knots must be strictly increasing, got {knots}")
    cols = [x, x ** 2, x ** 3] + [np.maximum(x - k, 0.0) ** 3 for k in knots]
    return np.column_stack(cols)


# ---------------------------------------------------------------- forests


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    mtry: int | None = None
    min_leaf: int = 5
    max_depth: int = -1
    bootstrap: bool = True
    seed: int = 0

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else max(1, p // 3)
        return int(min(max(m, 1), p))


@njit(cache=True)
def _best_split(X, y, idx, feats, min_leaf):
    # returns (feature, threshold, gain) with feature=-1 if none
    m = idx.shape[0]
    best_f = -1
    best_t = 0.0
    best_gain = 0.0
    tot = 0.0
    for i in range(m):
        tot += y[idx[i]]
    xs = np.empty(m)
    ys = np.empty(m)
    for f in feats:
        for i in range(m):
            xs[i] = X[idx[i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(m):
            ys[i] = y[idx[order[i]]]
        left = 0.0
        for i in range(m - 1):
            left += ys[i]
            nl = i + 1
            nr = m - nl
            if nl < min_leaf:
                continue
            if nr < min_leaf:
                break
            x0 = xs[order[i]]
            x1 = xs[order[i + 1]]
            if x1 <= x0:
                continue
            right = tot - left
            # weighted sse reduction up to a constant
            gain = left * left / nl + right * right / nr - tot * tot / m
            if gain > best_gain * (1.0 + 1e-12) + 1e-14:
                best_gain = gain
                best_f = f
                t = 0.5 * (x0 + x1)
                if t >= x1:
                    t = x0
                best_t = t
    return best_f, best_t, best_gain


@njit(cache=True)
def _grow_tree(X, y, idx, mtry, min_leaf, max_depth, feat, thr, left, right, value):
    # iterative depth-first growth; arrays sized 2*len(idx)
    p = X.shape[1]
    n_nodes = 1
    stack_node = np.empty(idx.shape[0] * 2 + 2, dtype=np.int64)
    stack_lo = np.empty_like(stack_node)
    stack_hi = np.empty_like(stack_node)
    stack_d = np.empty_like(stack_node)
    sp = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = idx.shape[0]
    stack_d[0] = 0
    sp = 1
    perm = np.arange(p)
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        depth = stack_d[sp]
        sub = idx[lo:hi]
        m = hi - lo
        s = 0.0
        for i in range(m):
            s += y[sub[i]]
        value[node] = s / m
        feat[node] = -1
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        ymin = y[sub[0]]
        ymax = y[sub[0]]
        for i in range(m):
            if y[sub[i]] < ymin:
                ymin = y[sub[i]]
            if y[sub[i]] > ymax:
                ymax = y[sub[i]]
        if ymax <= ymin:
            continue
        # random feature order; inspect mtry, keep going while nothing splits
        for i in range(p - 1, 0, -1):
            j = np.random.randint(0, i + 1)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        f = -1
        t = 0.0
        start = 0
        while start < p:
            stop = start + mtry if start == 0 else start + 1
            if stop > p:
                stop = p
            bf, bt, bg = _best_split(X, y, sub, perm[start:stop], min_leaf)
            if bf >= 0:
                f = bf
                t = bt
                break
            start = stop
        if f < 0:
            continue
        # partition sub in place
        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], f] <= t:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feat[node] = f
        thr[node] = t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack_node[sp] = n_nodes
        stack_lo[sp] = lo
        stack_hi[sp] = i
        stack_d[sp] = depth + 1
        sp += 1
        stack_node[sp] = n_nodes + 1
        stack_lo[sp] = i
        stack_hi[sp] = hi
        stack_d[sp] = depth + 1
        sp += 1
        n_nodes += 2
    return n_nodes


@njit(cache=True)
def _fit_forest(X, y, n_trees, mtry, min_leaf, max_depth, bootstrap, seed):
    n = X.shape[0]
    cap = 2 * n + 1
    feat = np.full((n_trees, cap), -1, dtype=np.int64)
    thr = np.zeros((n_trees, cap))
    left = np.zeros((n_trees, cap), dtype=np.int64)
    right = np.zeros((n_trees, cap), dtype=np.int64)
    value = np.zeros((n_trees, cap))
    np.random.seed(seed)
    for b in range(n_trees):
        if bootstrap:
            idx = np.random.randint(0, n, n).astype(np.int64)
        else:
            idx = np.arange(n).astype(np.int64)
        _grow_tree(X, y, idx, mtry, min_leaf, max_depth,
                   feat[b], thr[b], left[b], right[b], value[b])
    return feat, thr, left, right, value


@njit(cache=True)
def _predict_forest(X, feat, thr, left, right, value):
    m = X.shape[0]
    T = feat.shape[0]
    out = np.zeros(m)
    for i in range(m):
        s = 0.0
        for b in range(T):
            node = 0
            while feat[b, node] >= 0:
                if X[i, feat[b, node]] <= thr[b, node]:
                    node = left[b, node]
                else:
                    node = right[b, node]
            s += value[b, node]
        out[i] = s / T
    return out


@dataclass(frozen=True)
class ForestModel:
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    def predict(self, features):
        X = np.ascontiguousarray(features, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape}")
        return _predict_forest(X, self.feat, self.thr, self.left, self.right, self.value)


def forest_fit(features, y, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    """Bootstrap-aggregated CART regression trees (variance-reduction splits)."""
    X = np.ascontiguousarray(features, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("forest needs a non-empty feature matrix")
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError(f"features {X.shape} do not match target {y.shape}")
    if cfg.n_trees < 1 or cfg.min_leaf < 1:
        raise ValueError("n_trees and min_leaf must be positive")
    out = _fit_forest(X, y, cfg.n_trees, cfg.resolved_mtry(X.shape[1]), cfg.min_leaf,
                      cfg.max_depth, cfg.bootstrap, cfg.seed % (2 ** 32))
    return ForestModel(*out, n_features=X.shape[1])


def forest_predict(model: ForestModel, features) -> np.ndarray:
    return model.predict(features)


# ---------------------------------------------------------------- imputers


def _independent_columns(D, tol=1e-9):
    """Indices of a maximal linearly independent column subset (pivoted QR)."""
    if D.shape[1] == 0:
        return np.zeros(0, dtype=int)
    scale = np.sqrt(np.mean(D ** 2, axis=0))
    keep0 = np.flatnonzero(scale > 0)
    Ds = D[:, keep0] / scale[keep0]
    _, R, piv = scipy.linalg.qr(Ds, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(d > tol * d[0]))
    return np.sort(keep0[piv[:rank]])


@dataclass(frozen=True)
class BasisExpansionModel:
    columns: tuple  # (column index, knots or None, (lo, hi))
    coef: tuple

    def design(self, U):
        U = np.asarray(U, dtype=float)
        parts = [np.ones((U.shape[0], 1))]
        for j, knots, (lo, hi) in self.columns:
            if knots is None:
                parts.append(U[:, [j]])
            else:
                # no polynomial extrapolation beyond the training range
                parts.append(_spline_any(np.clip(U[:, j], lo, hi), knots))
        return np.hstack(parts)

    def predict(self, U):
        D = self.design(U)
        return D[:, self.coef[0]] @ self.coef[1]


def _spline_any(x, knots):
    # polynomial part plus truncated terms for however many distinct knots remain
    return spline_basis(x, knots) if len(knots) else np.column_stack([x, x ** 2, x ** 3])


@dataclass(frozen=True)
class BasisExpansionImputer:
    """Additive cubic splines per continuous column; binary columns enter linearly.

    Knots sit at the 33% and 67% quantiles of the training rows. Tied knots are
    merged and columns that are linearly dependent on earlier ones are dropped
    before the least-squares fit. Inputs are clamped to the training range
    before expansion, so predictions never extrapolate a cubic.
    """

    quantiles: tuple = (1 / 3, 2 / 3)
    kind: str = "be"

    def fit(self, U, y, target=None) -> BasisExpansionModel:
        U = np.asarray(U, dtype=float)
        cols = []
        for j in range(U.shape[1]):
            vals = np.unique(U[:, j])
            if vals.size <= 1:
                continue
            rng = (float(vals[0]), float(vals[-1]))
            if vals.size == 2:
                cols.append((j, None, rng))
            else:
                knots = np.unique(np.quantile(U[:, j], self.quantiles))
                cols.append((j, tuple(float(k) for k in knots), rng))
        model = BasisExpansionModel(columns=tuple(cols), coef=(np.zeros(0, dtype=int), np.zeros(0)))
        D = model.design(U)
        keep = _independent_columns(D)
        fit = ols_fit(D[:, keep], y, name=f"basis-expansion imputer ({target})")
        return BasisExpansionModel(columns=tuple(cols), coef=(keep, fit.coef))


@dataclass(frozen=True)
class ForestImputer:
    cfg: ForestConfig = field(default_factory=ForestConfig)
    kind: str = "rf"

    def fit(self, U, y, target=None) -> ForestModel:
        y = np.asarray(y, dtype=float)
        # distinct but reproducible streams per target
        seed = (self.cfg.seed * 1_000_003 + zlib.crc32(str(target).encode())) % (2 ** 32)
        return forest_fit(U, y, replace(self.cfg, seed=seed))


def _row_keys(U):
    U = np.ascontiguousarray(U, dtype=float)
    return [r.tobytes() for r in U]


@dataclass(frozen=True)
class OracleModel:
    table: Mapping

    def predict(self, U):
        try:
            return np.array([self.table[k] for k in _row_keys(U)])
        except KeyError:
            raise KeyError("oracle imputer asked for a row it was not given") from None


@dataclass(frozen=True)
class OracleImputer:
    """Returns supplied true targets; for testing only.

    ``truth`` maps a target id to a pair ``(U, values)``; prediction looks up
    each row of ``U`` exactly. Cross-fitting calls :meth:`bind` with the
    labeled targets, so by default the oracle passes the observed targets
    through.
    """

    truth: Mapping = field(default_factory=dict)
    kind: str = "oracle"

    def bind(self, target, U, values) -> "OracleImputer":
        if target in self.truth:
            return self
        return OracleImputer({**self.truth, target: (np.asarray(U), np.asarray(values))})

    def fit(self, U, y, target=None) -> OracleModel:
        if target not in self.truth:
            raise KeyError(f"oracle has no truth for target {target!r}")
        Ut, vals = self.truth[target]
        table = {}
        for k, v in zip(_row_keys(Ut), np.asarray(vals, dtype=float)):
            if k in table and table[k] != v:
                raise ValueError("oracle truth has conflicting values for a row")
            table[k] = float(v)
        return OracleModel(table)


@dataclass(frozen=True)
class _SubsetModel:
    inner: object
    columns: tuple

    def predict(self, U):
        return self.inner.predict(np.asarray(U, dtype=float)[:, list(self.columns)])


@dataclass(frozen=True)
class ColumnSubset:
    """Restricts another imputer to selected columns of ``U``."""

    inner: object
    columns: tuple

    @property
    def kind(self) -> str:
        return self.inner.kind

    def fit(self, U, y, target=None) -> _SubsetModel:
        U = np.asarray(U, dtype=float)
        return _SubsetModel(self.inner.fit(U[:, list(self.columns)], y, target=target), self.columns)


def make_imputer(kind: str, seed: int = 0, n_trees: int = 500, columns=None, **kw):
    """Build an imputer; ``columns`` optionally selects positions in ``U``."""
    if kind == "be":
        imp = BasisExpansionImputer(**kw)
    elif kind == "rf":
        imp = ForestImputer(ForestConfig(n_trees=n_trees, seed=seed, **kw))
    else:
        raise ValueError(f"unknown imputer kind {kind!r}")
    if columns is not None:
        columns = tuple(int(c) for c in columns)
        if not columns:
            raise ValueError("imputer needs at least one column")
        imp = ColumnSubset(imp, columns)
    return imp
