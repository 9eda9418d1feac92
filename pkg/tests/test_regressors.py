import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssdtr.regressors import (BasisExpansionImputer, ColumnSubset, ForestConfig, OracleImputer,
                              SeparationError, SingularSystemError, forest_fit, forest_predict,
                              logistic_fit, logistic_information, make_imputer, ols_fit,
                              sigmoid, solve_linear, spline_basis)


def gauss_elim(A, b):
    # textbook elimination with partial pivoting, used as an independent oracle
    A = [list(map(float, r)) + [float(v)] for r, v in zip(A, b)]
    n = len(A)
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(A[r][c]))
        A[c], A[p] = A[p], A[c]
        for r in range(c + 1, n):
            f = A[r][c] / A[c][c]
            for j in range(c, n + 1):
                A[r][j] -= f * A[c][j]
    x = [0.0] * n
    for r in reversed(range(n)):
        x[r] = (A[r][n] - sum(A[r][j] * x[j] for j in range(r + 1, n))) / A[r][r]
    return np.array(x)


def test_solve_identity_and_diagonal():
    np.testing.assert_allclose(solve_linear(np.eye(2), [3, -1]), [3, -1])
    np.testing.assert_allclose(solve_linear([[2, 0], [0, 4]], [2, 8]), [1, 2])


def test_solve_matches_elimination(rng):
    for _ in range(10):
        A = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        b = rng.normal(size=5)
        np.testing.assert_allclose(solve_linear(A, b), gauss_elim(A, b), rtol=0, atol=1e-10)


def test_solve_singular_names_system():
    with pytest.raises(SingularSystemError, match="my system"):
        solve_linear([[1, 2], [2, 4]], [1, 2], name="my system")
    with pytest.raises(SingularSystemError):
        solve_linear([[1, 1], [1, 1 + 1e-15]], [1, 2])


def test_solve_matrix_rhs(rng):
    A = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    B = rng.normal(size=(4, 3))
    np.testing.assert_allclose(A @ solve_linear(A, B), B, atol=1e-12)


def test_ols_examples(rng):
    assert ols_fit(np.ones((3, 1)), [1, 2, 3]).coef == pytest.approx([2.0])
    X = rng.normal(size=(20, 3))
    np.testing.assert_array_equal(ols_fit(X, np.zeros(20)).coef, np.zeros(3))
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    beta = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(ols_fit(X, X @ beta).coef, beta, atol=1e-8)


def test_ols_singular():
    X = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(SingularSystemError):
        ols_fit(X, np.arange(10.0))


@given(st.integers(5, 60), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_ols_residual_orthogonality(n, p, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, p))
    y = r.normal(size=n) * 10
    fit = ols_fit(X, y)
    resid = X.T @ (y - X @ fit.coef)
    assert np.max(np.abs(resid)) <= 1e-8 * max(1.0, np.abs(X.T @ y).max())
    np.testing.assert_allclose(fit.gram, fit.gram.T)


def test_logistic_closed_forms():
    one = np.ones((4, 1))
    assert logistic_fit(one, [0, 1, 0, 1]).coef == pytest.approx([0.0], abs=1e-12)
    assert logistic_fit(one, [1, 1, 1, 0]).coef == pytest.approx([np.log(3)], abs=1e-10)


def test_logistic_recovers_generator():
    r = np.random.default_rng(7)
    o1 = r.integers(0, 2, 200)
    X = np.column_stack([np.ones(200), o1])
    xi = np.array([0.3, -0.5])
    a = (r.random(200) < sigmoid(X @ xi)).astype(float)
    fit = logistic_fit(X, a)
    assert fit.converged and fit.final_score_norm <= 1e-8
    score = X.T @ (a - sigmoid(X @ fit.coef))
    assert np.max(np.abs(score)) <= 1e-8
    info = logistic_information(X, fit.coef)
    se = np.sqrt(np.diag(np.linalg.inv(info)) / 200)
    assert np.all(np.abs(fit.coef - xi) <= 3 * se)
    np.testing.assert_allclose(info, info.T)
    assert np.all(np.linalg.eigvalsh(info) > 0)


def test_logistic_errors():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    with pytest.raises(SeparationError):
        logistic_fit(X, [0, 0, 0, 1, 1, 1])
    with pytest.raises(ValueError, match="single class"):
        logistic_fit(X, np.ones(6))
    with pytest.raises(ValueError, match="binary"):
        logistic_fit(X, [0, 2, 0, 1, 1, 1])


@given(st.integers(30, 200), st.integers(0, 10 ** 6))
def test_logistic_score_identity(n, seed):
    r = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), r.normal(size=n)])
    a = (r.random(n) < sigmoid(X @ [0.2, 0.7])).astype(float)
    if a.min() == a.max():
        return
    fit = logistic_fit(X, a)
    assert np.max(np.abs(X.T @ (a - sigmoid(X @ fit.coef)))) <= 1e-8


def test_spline_examples():
    np.testing.assert_array_equal(spline_basis([0.0], (1, 2)), [[0, 0, 0, 0, 0]])
    np.testing.assert_array_equal(spline_basis([3.0], (1, 2)), [[3, 9, 27, 8, 1]])
    with pytest.raises(ValueError):
        spline_basis([0.0], (1, 1))


@pytest.mark.parametrize("k", [1.0, 2.0])
def test_spline_smooth_at_knots(k):
    eps = 1e-4

    def f(x):
        return spline_basis([x], (1.0, 2.0))[0]

    d1l = (f(k) - f(k - eps)) / eps
    d1r = (f(k + eps) - f(k)) / eps
    d2l = (f(k) - 2 * f(k - eps) + f(k - 2 * eps)) / eps ** 2
    d2r = (f(k + 2 * eps) - 2 * f(k + eps) + f(k)) / eps ** 2
    np.testing.assert_allclose(f(k + 1e-9), f(k - 1e-9), atol=1e-7)
    np.testing.assert_allclose(d1l, d1r, rtol=1e-3, atol=1e-6)
    np.testing.assert_allclose(d2l, d2r, rtol=1e-3, atol=2e-3)


def test_forest_constant_target(rng):
    X = rng.normal(size=(40, 3))
    m = forest_fit(X, np.full(40, 2.5), ForestConfig(n_trees=20))
    np.testing.assert_allclose(forest_predict(m, rng.normal(size=(10, 3))), 2.5)


def test_forest_single_stump_step():
    x = np.linspace(0, 1, 40)[:, None]
    y = (x[:, 0] > 0.5).astype(float)
    cfg = ForestConfig(n_trees=1, max_depth=1, bootstrap=False, min_leaf=1)
    np.testing.assert_array_equal(forest_predict(forest_fit(x, y, cfg), x), y)


def test_forest_noise_floor():
    r = np.random.default_rng(3)
    x = r.uniform(-3, 3, size=(500, 1))
    y = np.sin(x[:, 0]) + r.normal(0, 0.3, 500)
    pred = forest_predict(forest_fit(x, y, ForestConfig(n_trees=500, seed=1)), x)
    assert np.sqrt(np.mean((pred - y) ** 2)) < 0.3 * 1.2


def test_forest_deterministic_and_bounded(rng):
    X = rng.normal(size=(60, 4))
    y = rng.normal(size=60)
    cfg = ForestConfig(n_trees=30, seed=5)
    p1 = forest_predict(forest_fit(X, y, cfg), X)
    p2 = forest_predict(forest_fit(X, y, cfg), X)
    np.testing.assert_array_equal(p1, p2)
    q = forest_predict(forest_fit(X, y, cfg), 10 * rng.normal(size=(50, 4)))
    assert q.min() >= y.min() and q.max() <= y.max()


def test_forest_empty_features():
    with pytest.raises(ValueError):
        forest_fit(np.zeros((10, 0)), np.arange(10.0), ForestConfig(n_trees=2))


def test_forest_tree_matches_sklearn(rng):
    # one unbootstrapped tree over all features must equal a CART tree built independently
    tree = pytest.importorskip("sklearn.tree")
    X = rng.normal(size=(120, 3))
    y = X[:, 0] ** 2 + np.sin(3 * X[:, 1]) + rng.normal(0, 0.1, 120)
    ours = forest_fit(X, y, ForestConfig(n_trees=1, mtry=3, min_leaf=5, bootstrap=False))
    ref = tree.DecisionTreeRegressor(min_samples_leaf=5, random_state=0).fit(X, y)
    Z = rng.normal(size=(200, 3))
    np.testing.assert_allclose(forest_predict(ours, Z), ref.predict(Z), atol=1e-12)


def test_be_imputer_recovers_cubic(rng):
    U = np.column_stack([rng.uniform(-2, 2, 300), rng.integers(0, 2, 300)])
    y = U[:, 0] ** 3 - U[:, 0] + 2 * U[:, 1]
    m = BasisExpansionImputer().fit(U, y)
    np.testing.assert_allclose(m.predict(U), y, atol=1e-8)


def test_be_imputer_clamps_inputs(rng):
    U = rng.uniform(-1, 1, size=(100, 1))
    m = BasisExpansionImputer().fit(U, U[:, 0] ** 3)
    assert m.predict([[10.0]])[0] == pytest.approx(m.predict([[U.max()]])[0])


def test_be_imputer_handles_ties_and_constants(rng):
    # integer-valued column with tied quantiles, plus a constant column
    U = np.column_stack([rng.integers(0, 3, 80), np.ones(80), rng.normal(size=80)])
    y = rng.normal(size=80)
    pred = BasisExpansionImputer().fit(U, y).predict(U)
    assert np.all(np.isfinite(pred))


def test_column_subset(rng):
    U = rng.normal(size=(50, 3))
    y = 2 * U[:, 1]
    imp = make_imputer("be", columns=[1])
    assert isinstance(imp, ColumnSubset) and imp.kind == "be"
    np.testing.assert_allclose(imp.fit(U, y).predict(U), y, atol=1e-10)
    with pytest.raises(ValueError):
        make_imputer("be", columns=[])
    with pytest.raises(ValueError):
        make_imputer("svm")


def test_oracle_imputer_passthrough(rng):
    U = rng.normal(size=(10, 2))
    y = rng.normal(size=10)
    imp = OracleImputer().bind("y2", U, y)
    np.testing.assert_array_equal(imp.fit(U[:5], y[:5], target="y2").predict(U), y)
    with pytest.raises(KeyError):
        imp.fit(U, y, target="y3")


@given(arrays(float, (30, 2), elements=st.floats(-10, 10)), st.integers(0, 100))
def test_forest_prediction_range(X, seed):
    y = np.random.default_rng(seed).normal(size=30)
    m = forest_fit(X, y, ForestConfig(n_trees=5, seed=seed))
    p = forest_predict(m, X)
    assert p.min() >= y.min() - 1e-12 and p.max() <= y.max() + 1e-12
