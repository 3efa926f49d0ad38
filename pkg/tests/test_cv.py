from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steinpost import (
    BaseKernelConfig,
    ChainOutput,
    IntegrandEvals,
    NumericalError,
    PolynomialBasisSpec,
    SteinKernelConfig,
    ValidationError,
    WeightedSupport,
    cf_estimate,
    cross_validate_kernel,
    empirical_variance,
    evaluate_integrand,
    least_squares_proxy,
    secf_estimate,
    stein_monomial,
    vanilla_estimate,
    zvcv_estimate,
)
from steinpost.cv import BUILTIN_INTEGRANDS, cv_fold_assignment

from conftest import gaussian_chain, unit_gaussian


def make_evals(f_values, weights=None, points=None, grads=None, seed=0):
    f_values = np.asarray(f_values, dtype=float)
    m = f_values.size
    rng = np.random.default_rng(seed)
    if points is None:
        points = rng.standard_normal((m, 1))
    if grads is None:
        grads = -np.asarray(points)
    if weights is None:
        support = WeightedSupport.uniform(np.arange(m))
    else:
        support = WeightedSupport(indices=np.arange(m), weights=np.asarray(weights, float))
    return IntegrandEvals(f_values=f_values, support=support, points=points, grads=grads)


def gaussian_evals(f, m=20, d=1, seed=0):
    chain = gaussian_chain(m, d, seed=seed)
    return evaluate_integrand(f, chain)


class TestVanillaAndProxies:
    def test_constant_integrand_recovered_exactly(self):
        assert vanilla_estimate(make_evals([3.3, 3.3, 3.3])).estimate == 3.3

    def test_uniform_mean(self):
        assert vanilla_estimate(make_evals([1.0, 2.0, 3.0])).estimate == pytest.approx(2.0)

    def test_weighted_mean(self):
        evals = make_evals([4.0, 0.0, 0.0], weights=[0.5, 0.25, 0.25])
        assert vanilla_estimate(evals).estimate == pytest.approx(2.0)

    def test_empirical_variance_examples(self):
        assert empirical_variance(make_evals([5.0, 5.0, 5.0])) == 0.0
        assert empirical_variance(make_evals([0.0, 2.0])) == pytest.approx(1.0)
        with pytest.raises(ValidationError):
            empirical_variance(make_evals([1.0]))

    def test_empirical_variance_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal(11)
        w = rng.dirichlet(np.ones(11))
        evals = make_evals(f, weights=w)
        mean = np.sum(w * f)
        direct = np.sum(w * (f - mean) ** 2)
        assert empirical_variance(evals) == pytest.approx(direct, abs=1e-12)

    def test_least_squares_proxy_examples(self):
        assert least_squares_proxy(make_evals([1.0, 1.0])) == pytest.approx(1.0)
        evals = make_evals([0.0, 2.0])
        assert least_squares_proxy(evals) == pytest.approx(2.0)
        assert least_squares_proxy(evals) >= empirical_variance(evals)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_proxy_identity(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 15))
        evals = make_evals(rng.standard_normal(m), weights=rng.dirichlet(np.ones(m)))
        gap = least_squares_proxy(evals) - empirical_variance(evals)
        assert gap == pytest.approx(vanilla_estimate(evals).estimate ** 2, abs=1e-12)


class TestSteinMonomial:
    def test_first_order_is_score(self):
        x, u = np.array([0.7]), np.array([-0.7])
        assert stein_monomial([1], x, u) == pytest.approx(-0.7)

    def test_second_order_unit_gaussian(self):
        for x in (-1.3, 0.0, 2.1):
            val = stein_monomial([2], np.array([x]), np.array([-x]))
            assert val == pytest.approx(2.0 - 2.0 * x * x)

    def test_cross_term_two_dims(self):
        x = np.array([0.4, -1.1])
        u = np.array([0.9, 0.3])
        assert stein_monomial([1, 1], x, u) == pytest.approx(u[0] * x[1] + u[1] * x[0])

    def test_zero_multi_index_rejected(self):
        with pytest.raises(ValidationError):
            stein_monomial([0, 0], np.zeros(2), np.zeros(2))

    def test_zero_base_point_conventions(self):
        # 0^0 = 1 and the (a_j - 1) x^(a_j - 2) term vanishes for a_j = 1
        assert stein_monomial([1], np.array([0.0]), np.array([5.0])) == pytest.approx(5.0)
        assert stein_monomial([2], np.array([0.0]), np.array([0.0])) == pytest.approx(2.0)


class TestPolynomialBasis:
    @pytest.mark.parametrize("d,r", [(1, 1), (1, 3), (2, 2), (3, 2), (5, 1)])
    def test_count_formula(self, d, r):
        basis = PolynomialBasisSpec.build(d, r)
        assert basis.count == comb(d + r, d) - 1

    def test_graded_lexicographic_order_and_uniqueness(self):
        basis = PolynomialBasisSpec.build(2, 2)
        assert basis.multi_indices == ((0, 1), (1, 0), (0, 2), (1, 1), (2, 0))
        assert len(set(basis.multi_indices)) == basis.count

    def test_degree_zero_is_empty(self):
        assert PolynomialBasisSpec.build(3, 0).count == 0


class TestZvcv:
    def test_constant_integrand_exact(self):
        evals = gaussian_evals(lambda pts: np.full(pts.shape[0], 7.25), m=10)
        assert zvcv_estimate(evals, degree=2).estimate == pytest.approx(7.25, abs=1e-10)

    def test_linear_integrand_exact_for_unit_gaussian(self):
        evals = gaussian_evals(lambda pts: 3.0 - 2.0 * pts[:, 0], m=6)
        report = zvcv_estimate(evals, degree=1)
        assert report.estimate == pytest.approx(3.0, abs=1e-8)

    def test_matches_direct_weighted_least_squares(self):
        """Oracle: raw-monomial normal equations, no standardisation."""
        rng = np.random.default_rng(2)
        m = 25
        pts = rng.standard_normal((m, 1))
        w = rng.dirichlet(np.ones(m))
        f = np.sin(pts[:, 0]) + pts[:, 0] ** 2
        evals = make_evals(f, weights=w, points=pts, grads=-pts)
        design = np.column_stack(
            [np.ones(m), -pts[:, 0], 2.0 - 2.0 * pts[:, 0] ** 2]  # A_P of grad x, grad x^2
        )
        coef = np.linalg.solve(design.T @ (w[:, None] * design), design.T @ (w * f))
        report = zvcv_estimate(evals, degree=2)
        assert report.estimate == pytest.approx(coef[0], rel=1e-8)

    def test_too_few_samples_rejected(self):
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=3)
        with pytest.raises(ValidationError, match="more samples"):
            zvcv_estimate(evals, degree=2)

    def test_rank_deficient_design_raises(self):
        pts = np.tile([[0.5]], (6, 1))
        evals = make_evals(np.ones(6), points=pts, grads=-pts)
        with pytest.raises(NumericalError, match="rank deficient"):
            zvcv_estimate(evals, degree=2)


@pytest.fixture
def gaussian_kernel_cfg():
    return SteinKernelConfig(base=BaseKernelConfig(family="gaussian"), target=unit_gaussian(1))


class TestCf:
    def test_single_point_returns_value(self, gaussian_kernel_cfg):
        evals = make_evals([4.2], points=np.array([[0.3]]), grads=np.array([[-0.3]]))
        assert cf_estimate(evals, gaussian_kernel_cfg).estimate == pytest.approx(4.2)

    def test_weight_independence(self, gaussian_kernel_cfg):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((12, 1))
        f = np.cos(pts[:, 0])
        a = make_evals(f, points=pts, grads=-pts)
        b = make_evals(f, weights=rng.dirichlet(np.ones(12)), points=pts, grads=-pts)
        est_a = cf_estimate(a, gaussian_kernel_cfg).estimate
        est_b = cf_estimate(b, gaussian_kernel_cfg).estimate
        assert est_a == pytest.approx(est_b, abs=1e-12)

    def test_interpolates_at_nodes(self):
        cfg = SteinKernelConfig(base=BaseKernelConfig(), target=unit_gaussian(1))
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((15, 1))
        f = BUILTIN_INTEGRANDS["polysin"](pts)
        evals = make_evals(f, points=pts, grads=-pts)
        report = cf_estimate(evals, cfg)
        fitted = report.surrogate(pts, grads=-pts)
        np.testing.assert_allclose(fitted, f, atol=1e-6)

    def test_duplicates_are_merged(self, gaussian_kernel_cfg):
        pts = np.array([[0.1], [0.1], [0.9], [-0.4]])
        f = np.array([1.0, 1.0, 2.0, 3.0])
        dup = make_evals(f, points=pts, grads=-pts)
        unique = make_evals(f[1:], points=pts[1:], grads=-pts[1:])
        est_dup = cf_estimate(dup, gaussian_kernel_cfg).estimate
        est_unique = cf_estimate(unique, gaussian_kernel_cfg).estimate
        assert est_dup == pytest.approx(est_unique, rel=1e-10)


class TestSecf:
    def test_linear_integrand_exact(self, gaussian_kernel_cfg):
        evals = gaussian_evals(lambda pts: 3.0 - 2.0 * pts[:, 0], m=9)
        report = secf_estimate(evals, gaussian_kernel_cfg, degree=1)
        assert report.estimate == pytest.approx(3.0, abs=1e-8)

    def test_degree_zero_equals_cf(self, gaussian_kernel_cfg):
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=14)
        assert secf_estimate(evals, gaussian_kernel_cfg, degree=0).estimate == pytest.approx(
            cf_estimate(evals, gaussian_kernel_cfg).estimate, rel=1e-12
        )

    @pytest.mark.parametrize("d,r", [(1, 1), (1, 2), (3, 1), (3, 2)])
    def test_semi_exactness_on_basis_span(self, d, r):
        rng = np.random.default_rng(100 * d + r)
        target = unit_gaussian(d)
        cfg = SteinKernelConfig(base=BaseKernelConfig(), target=target)
        basis = PolynomialBasisSpec.build(d, r)
        m = 3 * (basis.count + 2)
        pts = rng.standard_normal((m, d))
        grads = -pts
        for _ in range(5):
            intercept = rng.uniform(-5, 5)
            coefs = rng.uniform(-2, 2, basis.count)
            f = np.full(m, intercept)
            for c, alpha in zip(coefs, basis.multi_indices):
                f += c * np.array(
                    [stein_monomial(alpha, x, u) for x, u in zip(pts, grads)]
                )
            evals = make_evals(f, points=pts, grads=grads)
            assert zvcv_estimate(evals, degree=r).estimate == pytest.approx(
                intercept, rel=1e-8, abs=1e-8
            )
            assert secf_estimate(evals, cfg, degree=r).estimate == pytest.approx(
                intercept, rel=1e-8, abs=1e-8
            )


class TestEstimatorProperties:
    def test_affine_equivariance(self):
        cfg = SteinKernelConfig(base=BaseKernelConfig(), target=unit_gaussian(1))
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=16, seed=6)
        a, b = 2.5, -1.75
        shifted = make_evals(
            a * evals.f_values + b, points=evals.points, grads=evals.grads
        )
        pairs = [
            (vanilla_estimate(evals).estimate, vanilla_estimate(shifted).estimate),
            (zvcv_estimate(evals, 2).estimate, zvcv_estimate(shifted, 2).estimate),
            (cf_estimate(evals, cfg).estimate, cf_estimate(shifted, cfg).estimate),
            (
                secf_estimate(evals, cfg, 2).estimate,
                secf_estimate(shifted, cfg, 2).estimate,
            ),
        ]
        for before, after in pairs:
            assert after == pytest.approx(a * before + b, abs=1e-10)

    def test_vanilla_and_zvcv_depend_on_weights(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((12, 1))
        f = BUILTIN_INTEGRANDS["polysin"](pts)
        w1 = np.full(12, 1 / 12)
        w2 = rng.dirichlet(np.ones(12))
        a1 = make_evals(f, weights=w1, points=pts, grads=-pts)
        a2 = make_evals(f, weights=w2, points=pts, grads=-pts)
        assert vanilla_estimate(a1).estimate != pytest.approx(
            vanilla_estimate(a2).estimate, abs=1e-6
        )
        assert zvcv_estimate(a1, 2).estimate != pytest.approx(
            zvcv_estimate(a2, 2).estimate, abs=1e-6
        )


class TestCrossValidation:
    def test_single_element_grid(self, gaussian_kernel_cfg):
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=20)
        assert cross_validate_kernel(evals, gaussian_kernel_cfg, grid=[0.7]) == 0.7

    def test_chosen_scale_minimises_heldout_error(self, gaussian_kernel_cfg):
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=24, seed=9)
        grid = list((1e-2, 1e-1, 1.0, 1e1, 1e2))
        chosen = cross_validate_kernel(
            evals, gaussian_kernel_cfg, grid=grid, folds=3, method="cf", seed=0
        )
        # independent recomputation through the public estimator surface
        labels = cv_fold_assignment(evals.m, 3, seed=0)
        scores = {}
        for lam in grid:
            cfg = SteinKernelConfig(
                base=BaseKernelConfig(family="gaussian", lengthscale=lam),
                target=gaussian_kernel_cfg.target,
            )
            fold_scores = []
            for fold in range(3):
                train, test = labels != fold, labels == fold
                sub = make_evals(
                    evals.f_values[train],
                    points=evals.points[train],
                    grads=evals.grads[train],
                )
                report = cf_estimate(sub, cfg)
                pred = report.surrogate(evals.points[test], grads=evals.grads[test])
                fold_scores.append(
                    float(evals.weights[test] @ (evals.f_values[test] - pred) ** 2)
                )
            scores[lam] = np.mean(fold_scores)
        assert scores[chosen] == min(scores.values())

    def test_fold_assignment_is_deterministic_and_balanced(self):
        a = cv_fold_assignment(20, 3, seed=4)
        b = cv_fold_assignment(20, 3, seed=4)
        np.testing.assert_array_equal(a, b)
        counts = np.bincount(a, minlength=3)
        assert counts.max() - counts.min() <= 1
        with pytest.raises(ValidationError):
            cv_fold_assignment(5, 3, seed=0)

    def test_validation(self, gaussian_kernel_cfg):
        evals = gaussian_evals(BUILTIN_INTEGRANDS["polysin"], m=20)
        with pytest.raises(ValidationError, match="method"):
            cross_validate_kernel(evals, gaussian_kernel_cfg, method="ridge")
        with pytest.raises(ValidationError, match="grid"):
            cross_validate_kernel(evals, gaussian_kernel_cfg, grid=[])


class TestEvaluateIntegrand:
    def test_defaults_to_full_uniform_support(self):
        chain = gaussian_chain(9, 1, seed=11)
        evals = evaluate_integrand(BUILTIN_INTEGRANDS["polysin"], chain)
        assert evals.m == 9
        np.testing.assert_allclose(evals.weights, 1.0 / 9.0)

    def test_subsupport_and_computed_gradients(self):
        chain = ChainOutput(states=np.random.default_rng(12).standard_normal((8, 1)))
        support = WeightedSupport.uniform([1, 3, 5])
        evals = evaluate_integrand(
            BUILTIN_INTEGRANDS["polysin"], chain, support=support, target=unit_gaussian(1)
        )
        np.testing.assert_allclose(evals.grads, -chain.states[[1, 3, 5]])

    def test_nonfinite_values_rejected(self):
        chain = gaussian_chain(5, 1)
        with pytest.raises(ValidationError, match="non-finite"):
            evaluate_integrand(lambda pts: np.full(pts.shape[0], np.nan), chain)
