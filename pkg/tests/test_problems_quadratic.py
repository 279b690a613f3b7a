import numpy as np
import pytest

from rabosim.errors import InvalidSpec, UnsupportedProblem
from rabosim.linalg import spectral_bounds
from rabosim.problems import (
    SampleBatch,
    derive_constants,
    inner_optimum_oracle,
    make_logistic_tune,
    make_quadratic,
    problem_from_config,
    problem_to_config,
    true_hypergradient_oracle,
)
from rabosim.problems.quadratic import (
    QuadraticProblem,
    QuadraticSpec,
    analytic_outer_minimizer,
)


def one_dim_problem(lam=0.0):
    """g = 0.5 (y - x)^2, f = 0.5 y^2 (+ lam/2 x^2)."""
    spec = QuadraticSpec(
        a_mats=[np.array([[1.0]])], b_mats=[np.array([[-1.0]])],
        c_vecs=[np.zeros(1)], outer_targets=[np.zeros(1)],
        inner_targets=[np.zeros(1)], u_mats=None, lam=lam,
        noise_f=0.0, noise_g=0.0, hetero=0.0, quartic=0.0, sine_amp=0.0,
        ball_radius=10.0)
    return QuadraticProblem(spec)


class TestMakeQuadratic:
    def test_zero_hetero_identical_clients(self):
        prob = make_quadratic(seed=1, n=4, d1=3, d2=5, hetero=0.0,
                              eig_range=(0.5, 2.0))
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal(3), rng.standard_normal(5)
        for i in range(1, 4):
            assert prob.value_g(i, x, y) == prob.value_g(0, x, y)
            assert np.array_equal(prob.grad_g_y(i, x, y), prob.grad_g_y(0, x, y))
            assert prob.value_f(i, x, y) == prob.value_f(0, x, y)

    def test_noiseless_gradient_is_exact_even_with_batch(self):
        prob = make_quadratic(seed=2, n=2, d1=3, d2=4, noise_g=0.0)
        x, y = np.ones(3), np.ones(4)
        batch = SampleBatch("g", seed=0, client=0)
        assert np.array_equal(prob.grad_g_y(0, x, y, batch),
                              prob.grad_g_y(0, x, y))

    def test_heterogeneity_bound_by_enumeration(self):
        prob = make_quadratic(seed=3, n=4, d1=4, d2=4, hetero=1.0,
                              eig_range=(0.8, 1.5))
        _, delta_g_sq = prob.heterogeneity_bounds()
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        mean_y = prob.mean_grad_g_y(x, y)
        mean_x = sum(prob.grad_g_x(i, x, y) for i in range(4)) / 4
        spread = np.mean([
            np.sum((prob.grad_g_y(i, x, y) - mean_y) ** 2)
            + np.sum((prob.grad_g_x(i, x, y) - mean_x) ** 2)
            for i in range(4)])
        assert spread > 0
        assert spread <= delta_g_sq + 1e-12

    def test_zero_hetero_zero_spread(self):
        prob = make_quadratic(seed=4, n=3, d1=3, d2=3, hetero=0.0)
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        # identical data: per-client gradients are bit-identical (spread 0);
        # the float mean of n identical vectors may differ by one ulp
        ref = prob.grad_g_y(0, x, y)
        assert max(np.linalg.norm(prob.grad_g_y(i, x, y) - ref)
                   for i in range(3)) == 0.0
        mean_y = prob.mean_grad_g_y(x, y)
        assert np.linalg.norm(ref - mean_y) <= 1e-14

    def test_invalid_eig_range(self):
        with pytest.raises(InvalidSpec):
            make_quadratic(seed=0, n=2, d1=2, d2=2, eig_range=(0.0, 1.0))
        with pytest.raises(InvalidSpec):
            make_quadratic(seed=0, n=2, d1=2, d2=2, eig_range=(2.0, 1.0))

    def test_eigenvalues_inside_range(self):
        prob = make_quadratic(seed=5, n=3, d1=4, d2=6, eig_range=(0.7, 2.5))
        for a in prob.spec.a_mats:
            lo, hi = spectral_bounds(a)
            assert lo >= 0.7 - 1e-9 and hi <= 2.5 + 1e-9

    def test_config_round_trip(self):
        prob = make_quadratic(seed=6, n=3, d1=4, d2=5, hetero=0.3,
                              noise_f=0.1, noise_g=0.2, eig_range=(0.9, 1.8),
                              quartic=0.05)
        clone = problem_from_config(problem_to_config(prob))
        assert np.array_equal(prob.spec.a_mats[1], clone.spec.a_mats[1])
        assert np.array_equal(prob.spec.c_vecs[2], clone.spec.c_vecs[2])
        assert np.array_equal(prob.spec.u_mats[0], clone.spec.u_mats[0])


class TestInnerOptimumOracle:
    def test_one_dim_tracking(self):
        prob = one_dim_problem()
        for x in (-2.0, 0.3, 5.0):
            assert inner_optimum_oracle(prob, np.array([x]))[0] == pytest.approx(x)

    def test_zero_offsets_zero_optimum(self):
        prob = make_quadratic(seed=7, n=2, d1=3, d2=3)
        spec = prob.spec
        zeroed = QuadraticProblem(QuadraticSpec(
            a_mats=spec.a_mats, b_mats=spec.b_mats,
            c_vecs=[np.zeros(3)] * 2, outer_targets=spec.outer_targets,
            inner_targets=spec.inner_targets, u_mats=None, lam=spec.lam,
            noise_f=0, noise_g=0, hetero=0, quartic=0, sine_amp=0,
            ball_radius=10.0))
        assert np.array_equal(inner_optimum_oracle(zeroed, np.zeros(3)),
                              np.zeros(3))

    def test_stationarity_of_oracle(self):
        prob = make_quadratic(seed=8, n=4, d1=4, d2=5, hetero=0.5,
                              eig_range=(0.6, 2.0))
        x = np.linspace(-1, 1, 4)
        ys = inner_optimum_oracle(prob, x)
        assert np.linalg.norm(prob.mean_grad_g_y(x, ys)) <= 1e-9

    def test_matches_gradient_descent(self):
        prob = make_quadratic(seed=9, n=3, d1=4, d2=5, hetero=0.4,
                              eig_range=(0.5, 1.5))
        x = np.array([0.2, -0.7, 1.1, 0.4])
        y = np.zeros(5)
        for _ in range(4000):  # descend the averaged lower objective
            g = prob.mean_grad_g_y(x, y)
            if np.linalg.norm(g) < 1e-12:
                break
            y = y - 0.5 * g
        oracle = inner_optimum_oracle(prob, x)
        assert np.linalg.norm(y - oracle) <= 1e-8

    def test_unsupported_problem(self):
        logi = make_logistic_tune(seed=0, n=1, imbalance_mu=1.0)
        with pytest.raises(UnsupportedProblem):
            inner_optimum_oracle(logi, np.zeros(logi.d1))


class TestTrueHypergradientOracle:
    def test_one_dim_closed_form(self):
        prob = one_dim_problem()
        for x in (-1.5, 0.0, 2.0):
            grad = true_hypergradient_oracle(prob, np.array([x]))
            assert grad[0] == pytest.approx(x, abs=1e-12)

    def test_stationary_by_construction(self):
        base = make_quadratic(seed=10, n=3, d1=4, d2=4, hetero=0.2, lam=0.0)
        x_hat = np.array([0.5, -0.3, 0.8, 0.0])
        ys = inner_optimum_oracle(base, x_hat)
        spec = base.spec
        pinned = QuadraticProblem(QuadraticSpec(
            a_mats=spec.a_mats, b_mats=spec.b_mats, c_vecs=spec.c_vecs,
            outer_targets=spec.outer_targets,
            inner_targets=[ys.copy() for _ in range(3)], u_mats=None,
            lam=0.0, noise_f=0, noise_g=0, hetero=spec.hetero, quartic=0,
            sine_amp=0, ball_radius=10.0))
        grad = true_hypergradient_oracle(pinned, x_hat)
        assert np.linalg.norm(grad) <= 1e-12

    @pytest.mark.parametrize("kwargs", [
        {},
        {"quartic": 0.1},
        {"sine_amp": 0.3},
        {"eig_range": (0.6, 1.8), "hetero": 0.5},
    ])
    def test_central_difference_consistency(self, kwargs):
        prob = make_quadratic(seed=11, n=4, d1=6, d2=6, lam=0.7, **kwargs)
        rng = np.random.default_rng(3)
        x = 0.5 * rng.standard_normal(6)
        oracle = true_hypergradient_oracle(prob, x)
        h = 1e-5
        fd = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd[k] = (prob.phi(x + e) - prob.phi(x - e)) / (2 * h)
        assert np.linalg.norm(fd - oracle) <= 1e-6 * max(1.0, np.linalg.norm(oracle))

    def test_directional_differences_20_directions(self):
        prob = make_quadratic(seed=12, n=3, d1=6, d2=6, hetero=0.3, lam=0.5,
                              eig_range=(0.8, 1.6))
        rng = np.random.default_rng(4)
        x = rng.standard_normal(6) * 0.3
        oracle = true_hypergradient_oracle(prob, x)
        h = 1e-5
        for _ in range(20):
            u = rng.standard_normal(6)
            u /= np.linalg.norm(u)
            fd = (prob.phi(x + h * u) - prob.phi(x - h * u)) / (2 * h)
            assert fd == pytest.approx(float(oracle @ u),
                                       rel=1e-6, abs=1e-8)

    def test_analytic_minimizer_is_stationary(self):
        prob = make_quadratic(seed=13, n=4, d1=5, d2=5, hetero=0.4, lam=0.8,
                              eig_range=(0.7, 1.9))
        x_star = analytic_outer_minimizer(prob)
        grad = true_hypergradient_oracle(prob, x_star)
        assert float(grad @ grad) <= 1e-16


class TestDeriveConstants:
    def test_identity_curvature(self):
        prob = make_quadratic(seed=14, n=3, d1=4, d2=4, eig_range=(1.0, 1.0))
        consts = derive_constants(prob)
        assert consts.mu_g == pytest.approx(1.0, abs=1e-12)
        assert consts.l_g2 == 0.0
        assert consts.L_y == consts.l_g1 / consts.mu_g
        # cross-check l_g1 against a direct spectral oracle of the joint block
        b = prob.spec.b_mats[0]
        joint = np.zeros((8, 8))
        joint[:4, :4] = prob.spec.a_mats[0]
        joint[:4, 4:] = b
        joint[4:, :4] = b.T
        assert consts.l_g1 == pytest.approx(abs(np.linalg.eigvalsh(joint)).max(),
                                            rel=1e-10)

    def test_decoupled_levels(self):
        prob = make_quadratic(seed=15, n=2, d1=3, d2=3, coupling=0.0)
        consts = derive_constants(prob)
        assert consts.L_y >= 0
        y1 = inner_optimum_oracle(prob, np.zeros(3))
        y2 = inner_optimum_oracle(prob, np.ones(3))
        assert np.linalg.norm(y1 - y2) == 0.0

    def test_lipschitz_probe_100_pairs(self):
        prob = make_quadratic(seed=16, n=4, d1=5, d2=6, hetero=0.5,
                              eig_range=(0.6, 2.2))
        consts = derive_constants(prob)
        rng = np.random.default_rng(5)
        for _ in range(100):
            x1, x2 = rng.standard_normal((2, 5))
            lhs = np.linalg.norm(inner_optimum_oracle(prob, x1)
                                 - inner_optimum_oracle(prob, x2))
            assert lhs <= consts.L_y * np.linalg.norm(x1 - x2) + 1e-12

    def test_sector_bounds_on_probes(self):
        prob = make_quadratic(seed=17, n=3, d1=4, d2=5, hetero=0.3,
                              eig_range=(0.5, 2.0))
        consts = derive_constants(prob)
        rng = np.random.default_rng(6)
        for _ in range(50):
            x = rng.standard_normal(4)
            y = rng.standard_normal(5)
            dy = rng.standard_normal(5)
            i = int(rng.integers(0, 3))
            diff = np.linalg.norm(prob.grad_g_y(i, x, y + dy)
                                  - prob.grad_g_y(i, x, y))
            assert consts.mu_g * np.linalg.norm(dy) <= diff + 1e-10
            assert diff <= consts.l_g1 * np.linalg.norm(dy) + 1e-10

    def test_unsupported_for_logistic(self):
        logi = make_logistic_tune(seed=0, n=1, imbalance_mu=1.0)
        with pytest.raises(UnsupportedProblem):
            derive_constants(logi)


class TestDerivativeCallbacks:
    def test_hessian_is_curvature_block(self):
        prob = make_quadratic(seed=18, n=2, d1=3, d2=4, eig_range=(0.5, 1.5))
        x1, y1 = np.ones(3), np.ones(4)
        x2, y2 = -np.ones(3), np.zeros(4)
        h1 = prob.hess_yy_g(0, x1, y1)
        h2 = prob.hess_yy_g(0, x2, y2)
        assert np.array_equal(h1, prob.spec.a_mats[0])
        assert np.array_equal(h1, h2)

    def test_cross_apply_matches_columns_and_fd(self):
        prob = make_quadratic(seed=19, n=2, d1=3, d2=4, eig_range=(0.7, 1.4))
        b = prob.spec.b_mats[0]
        x, y = np.array([0.1, -0.2, 0.4]), np.array([0.3, 0.1, -0.5, 0.2])
        for k in range(4):
            e_k = np.zeros(4)
            e_k[k] = 1.0
            col = prob.cross_xy_g_apply(0, x, y, e_k)
            assert np.allclose(col, b.T[:, k], atol=1e-14)
        # finite-difference oracle: columns of d(grad_g_y)/dx equal B columns
        h = 1e-6
        for s in range(3):
            e_s = np.zeros(3)
            e_s[s] = h
            fd_col = (prob.grad_g_y(0, x + e_s, y)
                      - prob.grad_g_y(0, x - e_s, y)) / (2 * h)
            assert np.linalg.norm(fd_col - b[:, s]) <= 1e-8

    def test_cross_apply_fd_with_quartic(self):
        prob = make_quadratic(seed=20, n=2, d1=3, d2=4, quartic=0.2)
        rng = np.random.default_rng(7)
        x, y, v = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
        applied = prob.cross_xy_g_apply(0, x, y, v)
        h = 1e-6
        fd = np.zeros(3)
        for s in range(3):
            e_s = np.zeros(3)
            e_s[s] = h
            fd[s] = float((prob.grad_g_y(0, x + e_s, y)
                           - prob.grad_g_y(0, x - e_s, y)) @ v) / (2 * h)
        assert np.linalg.norm(fd - applied) <= 1e-6

    def test_grad_f_fd_consistency(self):
        prob = make_quadratic(seed=21, n=2, d1=4, d2=3, lam=0.6, sine_amp=0.2,
                              hetero=0.3)
        rng = np.random.default_rng(8)
        x, y = rng.standard_normal(4), rng.standard_normal(3)
        h = 1e-6
        for k in range(4):
            e = np.zeros(4)
            e[k] = h
            fd = (prob.value_f(0, x + e, y) - prob.value_f(0, x - e, y)) / (2 * h)
            assert fd == pytest.approx(prob.grad_f_x(0, x, y)[k], abs=1e-7)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (prob.value_f(0, x, y + e) - prob.value_f(0, x, y - e)) / (2 * h)
            assert fd == pytest.approx(prob.grad_f_y(0, x, y)[k], abs=1e-7)

    def test_noisy_gradient_unbiased(self):
        prob = make_quadratic(seed=22, n=2, d1=3, d2=4, noise_g=0.5)
        x, y = np.ones(3), np.ones(4)
        exact = prob.grad_g_y(0, x, y)
        draws = np.stack([
            prob.grad_g_y(0, x, y, SampleBatch("g", seed=99, client=0, draw=t))
            for t in range(10 ** 4)])
        err = np.abs(draws.mean(axis=0) - exact)
        assert np.all(err <= 4 * 0.5 / 100)

    def test_common_random_numbers_cancel_noise(self):
        prob = make_quadratic(seed=23, n=2, d1=3, d2=4, noise_g=1.0)
        batch = SampleBatch("g", seed=5, client=1, draw=2)
        x, y = np.ones(3), np.ones(4)
        x2 = x.copy()
        x2[0] += 0.1
        noisy_diff = prob.grad_g_y(0, x2, y, batch) - prob.grad_g_y(0, x, y, batch)
        clean_diff = prob.grad_g_y(0, x2, y) - prob.grad_g_y(0, x, y)
        assert np.allclose(noisy_diff, clean_diff, atol=1e-12)

    def test_batch_averaging_shrinks_variance(self):
        prob = make_quadratic(seed=24, n=1, d1=2, d2=3, noise_g=1.0)
        x, y = np.zeros(2), np.zeros(3)
        exact = prob.grad_g_y(0, x, y)
        trials = 400

        def empirical_var(size):
            sq = 0.0
            for t in range(trials):
                draw = prob.grad_g_y(0, x, y, SampleBatch(
                    "g", seed=1000 + size, client=0, draw=t, size=size))
                sq += float(np.sum((draw - exact) ** 2))
            return sq / trials

        base = empirical_var(1)
        for size in (4, 16, 64):
            ratio = empirical_var(size) * size / base
            assert 0.8 <= ratio <= 1.2
