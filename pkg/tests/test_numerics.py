import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from embedexp.errors import (
    DomainError,
    InfeasibleError,
    NestingError,
    SeparationError,
    SingularMatrixError,
)
from embedexp.numerics import (
    BLOCK,
    CovarianceMatrix,
    DesignMatrix,
    assignment_min_cost,
    draw_mvnormal,
    draw_scaled_inv_chisq,
    logistic_newton,
    logistic_probabilities,
    lrt_compare,
    mahalanobis_matrix,
    mahalanobis_sq,
    make_rng,
    run_blocks,
    solve_ols,
)


def _gauss_solve(A, b):
    """Textbook Gaussian elimination with partial pivoting, pure Python floats."""
    n = len(b)
    M = [list(map(float, A[i])) + [float(b[i])] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(M[r][col]))
        M[col], M[piv] = M[piv], M[col]
        for r in range(col + 1, n):
            f = M[r][col] / M[col][col]
            for c in range(col, n + 1):
                M[r][c] -= f * M[col][c]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (M[r][n] - sum(M[r][c] * x[c] for c in range(r + 1, n))) / M[r][r]
    return np.array(x)


class TestOls:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(1)
        Z = rng.normal(size=(30, 2))
        X = DesignMatrix.from_covariates(Z, ("a", "b"))
        fit = solve_ols(X, 1.5 + 2 * Z[:, 0] - 0.5 * Z[:, 1])
        np.testing.assert_allclose(fit.coef, [1.5, 2, -0.5], atol=1e-12)
        assert fit.s2 == pytest.approx(0, abs=1e-25)

    def test_intercept_only(self):
        fit = solve_ols(np.ones((3, 1)), [1, 2, 3])
        assert fit.coef[0] == pytest.approx(2)
        assert fit.s2 == pytest.approx(1)
        assert fit.df == 2

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(2)
        X = np.column_stack([np.ones(20), rng.normal(size=(20, 2))])
        y = rng.normal(size=20)
        fit = solve_ols(X, y)
        np.testing.assert_allclose(fit.coef, _gauss_solve(X.T @ X, X.T @ y), atol=1e-10)
        rss = np.sum((y - X @ fit.coef) ** 2)
        assert fit.s2 == pytest.approx(rss / 17)
        np.testing.assert_allclose(fit.cov, np.linalg.inv(X.T @ X) * fit.s2, rtol=1e-9)

    def test_rank_deficient(self):
        Z = np.arange(10.0)
        X = np.column_stack([np.ones(10), Z, 2 * Z])
        with pytest.raises(SingularMatrixError):
            solve_ols(X, np.arange(10.0))

    def test_ill_conditioned_warns(self):
        t = np.arange(20.0)
        X = np.column_stack([np.ones(20), 1 + 1e-9 * t, np.sin(t)])  # full rank, cond ~ 4e8
        with pytest.warns(RuntimeWarning, match="condition"):
            solve_ols(X, t)

    def test_design_matrix_needs_constant(self):
        with pytest.raises(ValueError):
            DesignMatrix(np.zeros((3, 2)), ("a", "b"))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (25, 3), elements=st.floats(-1, 1)), arrays(np.float64, 25, elements=st.floats(-1, 1)))
    def test_residuals_orthogonal(self, Z, y):
        X = np.column_stack([np.ones(25), Z])
        try:
            fit = solve_ols(X, y)
        except SingularMatrixError:
            return
        assert np.max(np.abs(X.T @ (y - X @ fit.coef))) < 1e-8


def _irls_oracle(X, w, iters=100):
    # plain IRLS with numpy lstsq, independent of the production solver
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        eta = X @ beta
        p = 1 / (1 + np.exp(-eta))
        W = p * (1 - p)
        z = eta + (w - p) / W
        sw = np.sqrt(W)
        beta_new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        if np.max(np.abs(beta_new - beta)) < 1e-13:
            return beta_new
        beta = beta_new
    return beta


class TestLogistic:
    def test_matches_irls_oracle(self, synthetic_ds):
        terms = ("age", "height", "sex")
        X = DesignMatrix.from_covariates(synthetic_ds.covariates(terms), terms)
        w = synthetic_ds.treatment
        fit = logistic_newton(X, w)
        np.testing.assert_allclose(fit.coef, _irls_oracle(X.values, w), rtol=1e-6, atol=1e-8)
        p = logistic_probabilities(fit, X)
        assert np.all((p > 0) & (p < 1))
        assert p[w == 1].mean() > p[w == 0].mean()
        assert np.max(np.abs(X.values.T @ (w - p))) < 1e-6

    def test_no_signal(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=400)
        w = rng.permutation(np.r_[np.ones(100), np.zeros(300)])
        fit = logistic_newton(DesignMatrix.from_covariates(x, ("x",)), w)
        assert abs(fit.coef[1]) < 0.3
        # with a centred covariate the intercept sits near logit(mean w)
        fit0 = logistic_newton(np.ones((400, 1)), w)
        assert fit0.coef[0] == pytest.approx(math.log(0.25 / 0.75), abs=1e-9)

    def test_separation(self):
        x = np.linspace(-2, 2, 40)
        with pytest.raises(SeparationError):
            logistic_newton(DesignMatrix.from_covariates(x, ("x",)), (x > 0).astype(float))

    def test_one_class(self):
        with pytest.raises(DomainError):
            logistic_newton(np.ones((5, 1)), np.zeros(5))

    def test_lrt_identical_models(self, synthetic_ds):
        X = DesignMatrix.from_covariates(synthetic_ds.covariates(("age",)), ("age",))
        fit = logistic_newton(X, synthetic_ds.treatment)
        r = lrt_compare(fit, fit, 1)
        assert r.statistic == pytest.approx(0, abs=1e-9)
        assert r.p_value == pytest.approx(1)

    def test_lrt_nesting_violation(self, synthetic_ds):
        w = synthetic_ds.treatment
        small = logistic_newton(DesignMatrix.from_covariates(synthetic_ds.covariates(("age",)), ("age",)), w)
        big = logistic_newton(DesignMatrix.from_covariates(synthetic_ds.covariates(("age", "height")), ("age", "height")), w)
        with pytest.raises(NestingError):
            lrt_compare(small, big, 1)

    def test_lrt_power_on_quadratic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=2000)
        w = (rng.random(2000) < 1 / (1 + np.exp(-(-1 + 0.2 * x + 0.8 * x**2)))).astype(float)
        full = logistic_newton(DesignMatrix.from_covariates(np.column_stack([x, x**2]), ("x", "x2")), w)
        red = logistic_newton(DesignMatrix.from_covariates(x, ("x",)), w)
        r = lrt_compare(full, red, 1)
        assert r.p_value < 0.05
        assert r.p_value == pytest.approx(stats.chi2.sf(r.statistic, 1))


class TestMahalanobis:
    def test_basic_cases(self):
        S = CovarianceMatrix(np.array([[4.0, 0], [0, 1]]))
        assert mahalanobis_sq(np.array([1.0, 0]), np.zeros(2), S) == pytest.approx(0.25)
        assert mahalanobis_sq(np.array([1.0, 2]), np.array([1.0, 2]), S) == 0
        I = CovarianceMatrix(np.eye(3))
        u, v = np.array([1.0, 2, 3]), np.array([0.0, -1, 5])
        assert mahalanobis_sq(u, v, I) == pytest.approx(np.sum((u - v) ** 2))

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            mahalanobis_sq(np.zeros(2), np.ones(2), CovarianceMatrix(np.ones((2, 2))))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_affine_invariance_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.normal(size=(3, 3))
        S = B @ B.T + 0.5 * np.eye(3)
        A = rng.normal(size=(3, 3)) + 3 * np.eye(3)
        if abs(np.linalg.det(A)) < 1e-2:
            return
        b = rng.normal(size=3)
        u, v = rng.normal(size=3), rng.normal(size=3)
        d = mahalanobis_sq(u, v, CovarianceMatrix(S))
        assert d == pytest.approx(mahalanobis_sq(v, u, CovarianceMatrix(S)), rel=1e-10)
        d2 = mahalanobis_sq(A @ u + b, A @ v + b, CovarianceMatrix(A @ S @ A.T))
        assert d2 == pytest.approx(d, rel=1e-8, abs=1e-8)

    def test_matrix_agrees_with_pairwise(self):
        rng = np.random.default_rng(5)
        P, Q = rng.normal(size=(4, 2)), rng.normal(size=(6, 2))
        S = CovarianceMatrix.estimate(np.vstack([P, Q]))
        D = mahalanobis_matrix(P, Q, S)
        for i, j in itertools.product(range(4), range(6)):
            assert D[i, j] == pytest.approx(mahalanobis_sq(P[i], Q[j], S))


def _brute_assignment(cost):
    n, m = cost.shape
    return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))


class TestAssignment:
    def test_trivial(self):
        a = assignment_min_cost(np.array([[1.0, 2], [2, 1]]))
        assert list(a.columns) == [0, 1] and a.total == 2
        row = np.array([[5.0, 3, 9, 3.5]])
        assert assignment_min_cost(row).columns[0] == 1

    def test_infeasible(self):
        with pytest.raises(InfeasibleError):
            assignment_min_cost(np.ones((3, 2)))

    def test_brute_force_200_instances(self):
        rng = np.random.default_rng(6)
        for k in range(200):
            n = rng.integers(1, 6)
            m = rng.integers(n, 8)
            cost = rng.integers(0, 20, size=(n, m)).astype(float)
            if k % 3 == 0:
                cost = rng.random((n, m)) * 10
            sol = assignment_min_cost(cost)
            assert len(set(sol.columns)) == n
            assert sol.total == pytest.approx(_brute_assignment(cost), abs=1e-9)
            assert sol.total == pytest.approx(cost[np.arange(n), sol.columns].sum())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 20), st.integers(0, 2**31))
    def test_not_worse_than_greedy(self, n, extra, seed):
        rng = np.random.default_rng(seed)
        cost = rng.random((n, n + extra))
        free = np.ones(n + extra, bool)
        greedy = 0.0
        for i in range(n):
            j = int(np.argmin(np.where(free, cost[i], np.inf)))
            free[j] = False
            greedy += cost[i, j]
        assert assignment_min_cost(cost).total <= greedy + 1e-12


class TestDraws:
    def test_inv_chisq_large_df_concentrates(self):
        x = draw_scaled_inv_chisq(make_rng(1, "t"), 10**6, 0.37, size=2000)
        assert x.mean() == pytest.approx(0.37, rel=0.01)

    def test_inv_chisq_mean_formula(self):
        x = draw_scaled_inv_chisq(make_rng(2, "t"), 5, 2.0, size=10**6)
        assert x.mean() == pytest.approx(10 / 3, rel=0.01)

    @pytest.mark.parametrize("df,scale", [(0, 1.0), (3, 0.0), (3, -1.0), (3, math.inf)])
    def test_inv_chisq_domain(self, df, scale):
        with pytest.raises(DomainError):
            draw_scaled_inv_chisq(make_rng(0), df, scale)

    def test_mvnormal_zero_covariance(self):
        m = np.array([1.5, -2.0, 0.25])
        out = draw_mvnormal(make_rng(0), m, np.zeros((3, 3)), size=5)
        assert np.all(out == m)

    def test_mvnormal_moments(self):
        C = np.array([[2.0, 0.6], [0.6, 1.0]])
        x = draw_mvnormal(make_rng(3), np.array([1.0, -1.0]), C, size=200_000)
        np.testing.assert_allclose(x.mean(axis=0), [1, -1], atol=0.01)
        np.testing.assert_allclose(np.cov(x.T), C, atol=0.02)

    def test_mvnormal_not_psd(self):
        with pytest.raises(DomainError):
            draw_mvnormal(make_rng(0), np.zeros(2), np.array([[1.0, 2], [2, 1]]))

    def test_deterministic_streams(self):
        a = make_rng(7, "x", 3).random(5)
        b = make_rng(7, "x", 3).random(5)
        c = make_rng(7, "x", 4).random(5)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    @pytest.mark.parametrize("threads", [1, 4, 16])
    def test_run_blocks_thread_independent(self, threads):
        fn = lambda rng, size: rng.standard_normal(size)  # noqa: E731
        ref = run_blocks(fn, 3 * BLOCK + 17, 5, "tag", 1)
        got = run_blocks(fn, 3 * BLOCK + 17, 5, "tag", threads)
        assert got.tobytes() == ref.tobytes()
        assert len(got) == 3 * BLOCK + 17
