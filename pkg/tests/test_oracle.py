import itertools

import numpy as np
import pytest

from gmot.geometry import (PointCloud, pairwise_cost, apply_rigid, apply_linear,
                           random_rotation, random_shear)
from gmot.kernels import entropic_gw, sinkhorn
from gmot.oracle import (SizeLimitError, brute_force_gromov_monge, gw_cost_naive,
                         permutation_plan, reference_equivalence_check,
                         composition_optimality_check, finite_diff)

from conftest import seeded_cloud


class TestBruteForce:
    def test_identical_matrices(self):
        cx = pairwise_cost(seeded_cloud(5, seed=1), "euclidean", "none").values
        res = brute_force_gromov_monge(cx, cx)
        assert res.best_distortion_sq == 0.0
        assert res.best_permutation == tuple(range(5))

    def test_relabeled_matrix_recovered(self):
        cx = pairwise_cost(seeded_cloud(6, seed=2), "euclidean", "none").values
        perm = np.array([2, 0, 5, 1, 4, 3])
        cy = cx[np.ix_(perm, perm)]  # cy[perm_inv] recovers cx
        res = brute_force_gromov_monge(cx, cy)
        assert res.best_distortion_sq <= 1e-18
        sigma = np.asarray(res.best_permutation)
        assert np.max(np.abs(cx - cy[np.ix_(sigma, sigma)])) <= 1e-12

    def test_three_point_instance_full_enumeration(self):
        # off-diagonal distance multisets {1,2,3} and {1,2,4}
        cx = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]])
        cy = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 4.0], [2.0, 4.0, 0.0]])
        res = brute_force_gromov_monge(cx, cy, keep_all=True)
        best = np.inf
        for perm in itertools.permutations(range(3)):
            total = 0.0
            for i in range(3):
                for j in range(3):
                    total += (cx[i, j] - cy[perm[i], perm[j]]) ** 2
            best = min(best, total / 9.0)
        assert res.best_distortion_sq == pytest.approx(best, abs=1e-15)
        assert len(res.all_distortions) == 6

    def test_lexicographic_tie_break(self):
        cx = np.zeros((3, 3))
        res = brute_force_gromov_monge(cx, cx)
        assert res.best_permutation == (0, 1, 2)

    def test_size_guard(self):
        big = np.zeros((9, 9))
        with pytest.raises(SizeLimitError, match="n <= 8"):
            brute_force_gromov_monge(big, big)

    def test_every_permutation_bounded_below_by_minimum(self):
        cx = pairwise_cost(seeded_cloud(5, seed=3), "euclidean", "none").values
        cy = pairwise_cost(seeded_cloud(5, seed=4), "euclidean", "none").values
        res = brute_force_gromov_monge(cx, cy, keep_all=True)
        assert min(res.all_distortions) == res.best_distortion_sq
        assert all(v >= res.best_distortion_sq - 1e-15 for v in res.all_distortions)

    def test_scaling_equivariance(self):
        cx = pairwise_cost(seeded_cloud(5, seed=5), "euclidean", "none").values
        cy = pairwise_cost(seeded_cloud(5, seed=6), "euclidean", "none").values
        base = brute_force_gromov_monge(cx, cy)
        s = 3.7
        scaled = brute_force_gromov_monge(s * cx, s * cy)
        assert scaled.best_distortion_sq == pytest.approx(
            s ** 2 * base.best_distortion_sq, rel=1e-12)
        assert scaled.best_permutation == base.best_permutation


class TestGwCostNaive:
    def test_permutation_plan_equals_distortion(self):
        cx = pairwise_cost(seeded_cloud(5, seed=7), "euclidean", "none").values
        cy = pairwise_cost(seeded_cloud(5, seed=8), "euclidean", "none").values
        res = brute_force_gromov_monge(cx, cy, keep_all=True)
        for k, perm in enumerate(itertools.permutations(range(5))):
            plan = permutation_plan(perm, 5)
            assert gw_cost_naive(cx, cy, plan) == pytest.approx(
                res.all_distortions[k], abs=1e-12)

    def test_product_plan_hand_loop(self):
        cx = pairwise_cost(seeded_cloud(4, seed=9), "euclidean", "none").values
        w = np.full(4, 0.25)
        plan = np.outer(w, w)
        total = 0.0
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    for l in range(4):
                        total += (cx[i, k] - cx[j, l]) ** 2 * plan[i, j] * plan[k, l]
        assert gw_cost_naive(cx, cx, plan) == pytest.approx(total, abs=1e-12)

    def test_factorized_cost_matches_naive(self):
        w = np.full(5, 0.2)
        for seed in range(20):
            x = seeded_cloud(5, seed=seed)
            y = seeded_cloud(5, seed=seed + 1000)
            cx = pairwise_cost(x, "euclidean", "none").values
            cy = pairwise_cost(y, "euclidean", "none").values
            g = entropic_gw(cx, cy, w, w, 0.05, outer_iter=50, tol=1e-7)
            assert g.cost == pytest.approx(
                gw_cost_naive(cx, cy, g.coupling.plan), abs=1e-10)

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            gw_cost_naive(np.zeros((3, 3)), np.zeros((4, 4)), np.full((3, 3), 1 / 9))

    def test_invalid_plan_rejected(self):
        with pytest.raises(ValueError, match="mass"):
            gw_cost_naive(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))


class TestReferenceEquivalence:
    def test_seeded_instances(self):
        for seed in range(10):
            x = seeded_cloud(6, seed=seed)
            rigid = random_rotation(3, seed=seed + 50)
            y = seeded_cloud(6, seed=seed + 100)
            rep = reference_equivalence_check(x, rigid, y)
            assert rep.passed, f"seed {seed}: residual {rep.residual}"
            assert rep.residual <= 1e-9

    def test_isomorphic_target_zero(self):
        x = seeded_cloud(6, seed=11)
        rigid = random_rotation(3, seed=12)
        z = apply_rigid(x, rigid)
        rep = reference_equivalence_check(x, rigid, z)
        assert rep.gm_source_target <= 1e-18
        assert rep.gm_reference_target <= 1e-18

    def test_sheared_target_nonzero_common_value(self):
        x = seeded_cloud(6, seed=13)
        rigid = random_rotation(3, seed=14)
        z = apply_rigid(x, rigid)
        y = apply_linear(z, random_shear(3, 0.8, seed=15))
        rep = reference_equivalence_check(x, rigid, y)
        assert rep.passed
        assert rep.gm_source_target > 1e-6

    def test_report_serializes(self):
        x = seeded_cloud(4, seed=16)
        rep = reference_equivalence_check(x, random_rotation(3, seed=17), x)
        d = rep.to_dict()
        assert set(d) == {"gm_source_target", "gm_reference_target", "residual",
                          "perm_source_target", "perm_reference_target",
                          "tolerance", "passed"}


class TestCompositionOptimality:
    def test_sheared_target(self):
        x = seeded_cloud(6, seed=20)
        rigid = random_rotation(3, seed=21)
        z = apply_rigid(x, rigid)
        y = apply_linear(z, random_shear(3, 0.6, seed=22))
        rep = composition_optimality_check(x, rigid, y)
        assert rep.passed
        assert rep.residual <= 1e-9

    def test_reference_target_zero(self):
        x = seeded_cloud(5, seed=23)
        rigid = random_rotation(3, seed=24)
        z = apply_rigid(x, rigid)
        rep = composition_optimality_check(x, rigid, z)
        assert rep.gm_direct <= 1e-18
        assert rep.composed_distortion <= 1e-18

    def test_unstructured_target(self):
        for seed in range(6):
            x = seeded_cloud(5, seed=seed + 30)
            rigid = random_rotation(3, seed=seed + 60)
            y = seeded_cloud(5, seed=seed + 90)
            rep = composition_optimality_check(x, rigid, y)
            assert rep.passed, f"seed {seed}: residual {rep.residual}"


class TestFiniteDiff:
    def test_quadratic(self):
        grad = finite_diff(lambda v: float(np.sum(v ** 2)), np.array([1.0, 2.0]))
        assert np.allclose(grad, [2.0, 4.0], atol=1e-8)

    def test_indices_subset(self):
        grad = finite_diff(lambda v: float(np.sum(v ** 3)), np.array([1.0, 2.0, 3.0]),
                           indices=[2, 0])
        assert np.allclose(grad, [27.0, 3.0], atol=1e-6)

    def test_sinkhorn_envelope_consistency(self):
        # the linear-cost position gradient of the kernels module agrees with
        # differencing the entropy-included value
        from gmot.geometry import cross_cost
        a = seeded_cloud(6, seed=40, scale=0.5)
        b = seeded_cloud(6, seed=41, scale=0.5)
        kw = dict(max_iter=50000, tol=1e-9, anneal=True, stabilized=True)
        c = cross_cost(a, b, "sq_euclidean", "none").values
        r = sinkhorn(c, a.weights, b.weights, 0.1, source_points=a.points,
                     target_points=b.points, metric="sq_euclidean", **kw)

        def value(flat):
            cc = cross_cost(PointCloud.uniform(flat.reshape(a.points.shape)), b,
                            "sq_euclidean", "none").values
            return sinkhorn(cc, a.weights, b.weights, 0.1, **kw).reg_cost

        num = finite_diff(value, a.points, step=1e-5)
        assert np.abs(r.grad_source - num).max() / np.abs(num).max() <= 1e-3


class TestEntropicBias:
    def test_bounded_bias_at_small_epsilon(self):
        w = np.full(6, 1 / 6)
        for seed in range(6):
            x = seeded_cloud(6, seed=seed + 200)
            y = seeded_cloud(6, seed=seed + 300)
            cx = pairwise_cost(x, "euclidean", "max").values
            cy = pairwise_cost(y, "euclidean", "max").values
            oracle = brute_force_gromov_monge(cx, cy).best_distortion_sq
            g = entropic_gw(cx, cy, w, w, 0.001, outer_iter=300, tol=1e-8,
                            anneal=True, stabilized=True)
            assert g.cost <= oracle + 0.05
