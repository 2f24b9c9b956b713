import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from otpush import transport
from otpush.dtw import pseudo_pairs
from otpush.numkit import ContractError, ShapeError
from otpush.transport import (
    blur_to_epsilon,
    exact_ot,
    joint_ot_loss,
    latent_sq_dist,
    mmd_loss,
    shape_cost,
    sinkhorn,
    transport_cost,
    wasserstein2,
)


def uniform(n):
    return np.full(n, 1.0 / n)


class TestLatentSqDist:
    def test_identical_batches_zero_diagonal(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(5, 3))
        assert np.array_equal(np.diag(latent_sq_dist(z, z)), np.zeros(5))

    def test_unit_vectors(self):
        e1 = np.array([[1.0, 0.0]])
        e2 = np.array([[0.0, 1.0]])
        assert latent_sq_dist(e1, e2)[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(7, 6))
        d = latent_sq_dist(a, b)
        for i in range(4):
            for j in range(7):
                naive = sum((a[i, k] - b[j, k]) ** 2 for k in range(6))
                assert abs(d[i, j] - naive) <= 1e-9

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            latent_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


class TestShapeCost:
    def test_discount_count_equals_columns(self):
        rng = np.random.default_rng(2)
        base = rng.uniform(1.0, 2.0, size=(5, 7))
        pairs = pseudo_pairs(rng.uniform(size=(5, 7)))
        shaped = shape_cost(base, pairs, 0.25)
        assert int(np.sum(shaped.shaped != shaped.base)) == 7

    def test_all_ones_identity_pairs(self):
        base = np.ones((3, 3))
        pairs = pseudo_pairs(np.eye(3) * -1.0 + 1.0)
        shaped = shape_cost(base, pairs, 0.1)
        assert np.allclose(np.diag(shaped.shaped), 0.1)
        off = shaped.shaped[~np.eye(3, dtype=bool)]
        assert np.all(off == 1.0)

    def test_undiscounting_recovers_base(self):
        rng = np.random.default_rng(3)
        base = rng.uniform(0.5, 3.0, size=(6, 4))
        pairs = pseudo_pairs(rng.uniform(size=(6, 4)))
        lam = 0.37
        shaped = shape_cost(base, pairs, lam)
        recovered = shaped.shaped.copy()
        cols = np.arange(4)
        recovered[pairs.pair_index, cols] = recovered[pairs.pair_index, cols] / lam
        assert np.max(np.abs(recovered - base)) <= 1e-12

    @pytest.mark.parametrize("lam", [0.0, 1.0, -0.5, 2.0])
    def test_lambda_out_of_range_rejected(self, lam):
        pairs = pseudo_pairs(np.ones((2, 2)))
        with pytest.raises(ContractError):
            shape_cost(np.ones((2, 2)), pairs, lam)


class TestSinkhorn:
    def test_single_cell_plan(self):
        plan = sinkhorn(np.array([1.0]), np.array([1.0]), np.array([[3.5]]), 0.1)
        assert np.allclose(plan.matrix, [[1.0]])
        assert transport_cost(plan, np.array([[3.5]])) == pytest.approx(3.5)

    def test_large_epsilon_gives_product_coupling(self):
        rng = np.random.default_rng(4)
        cost = rng.uniform(size=(4, 6))
        mu_h, mu_r = uniform(4), uniform(6)
        plan = sinkhorn(mu_h, mu_r, cost, epsilon=1e6 * cost.max())
        product = np.outer(mu_h, mu_r)
        assert np.max(np.abs(plan.matrix - product)) <= 1e-6

    def test_close_to_exact_ot_at_small_epsilon(self):
        rng = np.random.default_rng(5)
        for n in (3, 5, 7):
            cost = latent_sq_dist(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
            eps = 1e-3 * float(np.median(cost))
            plan = sinkhorn(uniform(n), uniform(n), cost, eps, max_iters=50_000, tol=1e-9)
            exact_cost, _ = exact_ot(cost)
            sk_cost = transport_cost(plan, cost)
            # within 1%; a partially converged plan is only near-feasible,
            # so it may sit slightly on either side of the optimum
            assert abs(sk_cost - exact_cost) <= 0.01 * exact_cost + 1e-12

    def test_marginals_satisfied_at_convergence(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            n, m = rng.integers(2, 9), rng.integers(2, 9)
            cost = rng.uniform(size=(n, m))
            mu_h = rng.uniform(0.2, 1.0, n)
            mu_h /= mu_h.sum()
            mu_r = rng.uniform(0.2, 1.0, m)
            mu_r /= mu_r.sum()
            plan = sinkhorn(mu_h, mu_r, cost, 0.3, max_iters=5000, tol=1e-8)
            assert plan.converged
            assert np.max(np.abs(plan.matrix.sum(axis=1) - mu_h)) <= 1e-6
            assert np.max(np.abs(plan.matrix.sum(axis=0) - mu_r)) <= 1e-6
            assert np.all(plan.matrix >= 0.0)

    def test_cost_monotone_in_epsilon(self):
        # epsilon range where the solver fully converges, so the costs
        # being compared are the actual entropic optima
        rng = np.random.default_rng(7)
        for _ in range(10):
            n = int(rng.integers(3, 7))
            cost = latent_sq_dist(rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
            scale = float(np.median(cost))
            costs = []
            for eps in (0.3 * scale, 1.0 * scale, 3.0 * scale):
                plan = sinkhorn(uniform(n), uniform(n), cost, eps,
                                max_iters=50_000, tol=1e-12)
                assert plan.converged
                costs.append(transport_cost(plan, cost))
            assert costs[0] <= costs[1] + 1e-9
            assert costs[1] <= costs[2] + 1e-9

    def test_exact_ot_lower_bounds_sinkhorn(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            cost = rng.uniform(size=(n, n))
            exact_cost, _ = exact_ot(cost)
            for eps in (0.01, 0.1, 1.0):
                plan = sinkhorn(uniform(n), uniform(n), cost, eps,
                                max_iters=20_000, tol=1e-9)
                # a partially converged plan is infeasible by up to its
                # marginal residual, which loosens the bound accordingly
                slack = n * plan.marginal_residual * float(cost.max()) + 1e-9
                assert exact_cost <= transport_cost(plan, cost) + slack

    def test_non_convergence_is_soft(self):
        rng = np.random.default_rng(9)
        cost = rng.uniform(size=(6, 6)) * 100
        plan = sinkhorn(uniform(6), uniform(6), cost, 1e-6, max_iters=3, tol=1e-12)
        assert not plan.converged
        assert plan.iterations_used == 3
        assert np.isfinite(plan.marginal_residual)
        assert np.all(np.isfinite(plan.matrix))

    def test_bad_weights_rejected(self):
        cost = np.ones((2, 2))
        with pytest.raises(ContractError):
            sinkhorn(np.array([0.5, 0.6]), uniform(2), cost, 0.1)
        with pytest.raises(ContractError):
            sinkhorn(np.array([-0.5, 1.5]), uniform(2), cost, 0.1)
        with pytest.raises(ContractError):
            sinkhorn(uniform(2), uniform(2), cost, -0.1)
        with pytest.raises(ContractError):
            sinkhorn(uniform(2), uniform(2), np.array([[1.0, np.inf], [0.0, 1.0]]), 0.1)

    def test_envelope_gradient_on_separated_instances(self):
        """d(plan . C)/dC_kl ~ plan_kl when the assignment is well separated.

        The detached-plan gradient is exact only where the optimal
        assignment is stable under perturbation; instances with a clearly
        separated optimum (the regime the shaped cost creates) are used.
        """
        rng = np.random.default_rng(10)
        for _ in range(3):
            n = 4
            perm = rng.permutation(n)
            cost = rng.uniform(1.0, 2.0, size=(n, n))
            cost[np.arange(n), perm] = rng.uniform(0.0, 0.2, size=n)
            eps = 0.02
            solve = lambda c: sinkhorn(uniform(n), uniform(n), c, eps,
                                       max_iters=5000, tol=1e-12)
            plan = solve(cost)
            assert plan.converged
            h = 1e-6
            fd = np.zeros_like(cost)
            for i in range(n):
                for j in range(n):
                    up_c = cost.copy()
                    up_c[i, j] += h
                    dn_c = cost.copy()
                    dn_c[i, j] -= h
                    fd[i, j] = (transport_cost(solve(up_c), up_c)
                                - transport_cost(solve(dn_c), dn_c)) / (2 * h)
            rel = np.linalg.norm(fd - plan.matrix) / np.linalg.norm(plan.matrix)
            assert rel <= 1e-3

    def test_shaped_cost_attracts_plan_mass(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n = 5
            base = rng.uniform(0.5, 2.0, size=(n, n))
            pairs = pseudo_pairs(rng.uniform(size=(n, n)))
            shaped = shape_cost(base, pairs, 0.1).shaped
            eps = 0.1
            plan_shaped = sinkhorn(uniform(n), uniform(n), shaped, eps,
                                   max_iters=20_000, tol=1e-10)
            plan_plain = sinkhorn(uniform(n), uniform(n), base, eps,
                                  max_iters=20_000, tol=1e-10)
            cols = np.arange(n)
            mass_shaped = plan_shaped.matrix[pairs.pair_index, cols].sum()
            mass_plain = plan_plain.matrix[pairs.pair_index, cols].sum()
            assert mass_shaped >= mass_plain - 1e-12


class TestExactOt:
    def test_zero_diagonal_prefers_identity(self):
        cost, perm = exact_ot(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert cost == 0.0
        assert perm == (0, 1)

    def test_antidiagonal_case(self):
        cost, perm = exact_ot(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert cost == pytest.approx(1.0)
        assert perm == (1, 0)

    def test_matches_assignment_solver(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            c = rng.uniform(size=(5, 5))
            ours, _ = exact_ot(c)
            rows, cols = linear_sum_assignment(c)
            assert ours == pytest.approx(c[rows, cols].sum() / 5, abs=1e-12)

    def test_refuses_large_instances(self):
        with pytest.raises(ContractError):
            exact_ot(np.zeros((9, 9)))

    def test_refuses_non_square(self):
        with pytest.raises(ContractError):
            exact_ot(np.zeros((3, 4)))


class TestJointOtLoss:
    def test_single_pair_closed_form(self):
        z_h = np.array([[1.0, 2.0]])
        z_r = np.array([[0.5, -1.0]])
        a = np.zeros((1, 4, 2))
        lam = 0.1
        res = joint_ot_loss(z_h, z_r, a, a, lam=lam, epsilon=0.05)
        d = float(np.sum((z_h - z_r) ** 2))
        assert res.loss == pytest.approx(lam * d, rel=1e-9)
        assert np.allclose(res.grad_z_h, 2 * lam * (z_h - z_r), rtol=1e-9)
        assert np.allclose(res.grad_z_r, -2 * lam * (z_h - z_r), rtol=1e-9)

    def test_identical_batches_bounded(self):
        rng = np.random.default_rng(13)
        z = rng.normal(size=(4, 3))
        a = rng.normal(size=(4, 5, 2))
        res = joint_ot_loss(z, z, a, a, lam=0.1, epsilon=0.01)
        assert np.array_equal(res.shaped.pairs.pair_index, np.arange(4))
        assert 0.0 <= res.loss <= float(res.shaped.shaped.max()) + 1e-12

    def test_gradient_vs_finite_differences(self):
        """Deep-freeze epsilon: the re-solved plan is locally constant."""
        rng = np.random.default_rng(14)
        h = 1e-5
        for trial in range(3):
            z_h = rng.normal(size=(5, 4))
            z_r = rng.normal(size=(5, 4))
            a_h = rng.normal(size=(5, 3, 2))
            a_r = rng.normal(size=(5, 3, 2))
            eps = 1e-4 * float(np.median(latent_sq_dist(z_h, z_r)))
            kw = dict(lam=0.1, epsilon=eps, max_iters=500, tol=1e-9)
            res = joint_ot_loss(z_h, z_r, a_h, a_r, **kw)
            for _ in range(4):
                i, j = rng.integers(0, 5), rng.integers(0, 4)
                which = rng.integers(0, 2)
                base = z_h if which == 0 else z_r
                probe = base.copy()
                probe[i, j] += h
                up = joint_ot_loss(probe if which == 0 else z_h,
                                   probe if which == 1 else z_r, a_h, a_r, **kw).loss
                probe[i, j] -= 2 * h
                dn = joint_ot_loss(probe if which == 0 else z_h,
                                   probe if which == 1 else z_r, a_h, a_r, **kw).loss
                fd = (up - dn) / (2 * h)
                an = (res.grad_z_h if which == 0 else res.grad_z_r)[i, j]
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) <= 1e-3

    def test_lambda_one_equals_unshaped(self):
        rng = np.random.default_rng(15)
        z_h, z_r = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        a_h, a_r = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 2))
        res_lam1 = joint_ot_loss(z_h, z_r, a_h, a_r, lam=1.0, epsilon=0.1)
        res_none = joint_ot_loss(z_h, z_r, a_h, a_r, lam=0.1, epsilon=0.1,
                                 pairing="none")
        assert res_lam1.loss == res_none.loss
        assert np.array_equal(res_lam1.grad_z_h, res_none.grad_z_h)


class TestMmd:
    def test_identical_multisets_zero(self):
        rng = np.random.default_rng(16)
        z = rng.normal(size=(6, 3))
        assert abs(mmd_loss(z, z, sigma=0.7)) <= 1e-12

    def test_two_singletons_closed_form(self):
        r = 1.7
        sigma = 0.9
        z_h = np.array([[0.0]])
        z_r = np.array([[r]])
        expected = 2.0 - 2.0 * np.exp(-r * r / (2 * sigma * sigma))
        assert mmd_loss(z_h, z_r, sigma) == pytest.approx(expected, rel=1e-12)

    def test_matches_naive_triple_sum(self):
        rng = np.random.default_rng(17)
        z_h, z_r = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
        sigma = 1.3

        def k(x, y):
            return np.exp(-np.sum((x - y) ** 2) / (2 * sigma**2))

        n, m = 5, 7
        naive = (
            sum(k(z_h[i], z_h[j]) for i in range(n) for j in range(n)) / n**2
            + sum(k(z_r[i], z_r[j]) for i in range(m) for j in range(m)) / m**2
            - 2 * sum(k(z_h[i], z_r[j]) for i in range(n) for j in range(m)) / (n * m)
        )
        assert mmd_loss(z_h, z_r, sigma) == pytest.approx(naive, abs=1e-9)

    def test_bad_sigma_rejected(self):
        with pytest.raises(ContractError):
            mmd_loss(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


class TestWasserstein2:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(18)
        z = rng.normal(size=(6, 4))
        assert wasserstein2(z, z) == pytest.approx(0.0, abs=1e-9)

    def test_two_singletons_distance(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        assert wasserstein2(a, b) == pytest.approx(5.0, rel=1e-12)

    def test_small_sets_match_permutation_oracle(self):
        rng = np.random.default_rng(19)
        for _ in range(10):
            a = rng.normal(size=(6, 3))
            b = rng.normal(size=(6, 3))
            cost, _ = exact_ot(latent_sq_dist(a, b))
            assert wasserstein2(a, b) == pytest.approx(np.sqrt(cost), abs=1e-6)

    def test_separated_blobs_approach_offset(self):
        rng = np.random.default_rng(20)
        r = 50.0
        a = rng.normal(scale=0.5, size=(40, 2))
        b = rng.normal(scale=0.5, size=(40, 2)) + np.array([r, 0.0])
        w2 = wasserstein2(a, b, blur=0.05)
        assert abs(w2 - r) / r <= 0.10

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(21)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(50, 3)) + 1.0
        assert wasserstein2(a, b) == wasserstein2(b, a)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            wasserstein2(np.zeros((0, 2)), np.zeros((3, 2)))

    def test_blur_mapping(self):
        assert blur_to_epsilon(0.05) == pytest.approx(0.0025)
        with pytest.raises(ContractError):
            blur_to_epsilon(0.0)
