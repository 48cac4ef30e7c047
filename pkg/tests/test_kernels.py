import itertools

import numpy as np
import pytest

from gmot.geometry import (PointCloud, pairwise_cost, cross_cost, apply_rigid,
                           random_rotation, random_shear, apply_linear)
from gmot.kernels import (sinkhorn, sinkhorn_coupling, sinkhorn_divergence,
                          entropic_gw, distortion_sq, gromov_monge_gap,
                          plan_position_grads)
from gmot.oracle import brute_force_gromov_monge, finite_diff

from conftest import seeded_cloud


def exact_ot_by_permutations(c: np.ndarray) -> float:
    """Exact uniform-marginal OT via enumeration (optimum is a permutation)."""
    n = c.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(c[i, j] for i, j in enumerate(perm)) / n)
    return best


class TestSinkhorn:
    def test_single_point(self):
        r = sinkhorn(np.zeros((1, 1)), [1.0], [1.0], 0.1)
        assert r.cost == 0.0
        assert np.allclose(r.coupling.plan, [[1.0]])

    def test_two_point_diagonal(self):
        r = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5], 0.001)
        assert abs(r.cost) <= 1e-6
        assert np.allclose(r.coupling.plan, 0.5 * np.eye(2), atol=1e-6)

    def test_matches_exact_ot_small(self):
        rng = np.random.default_rng(77)
        c = rng.uniform(size=(6, 6))
        u = np.full(6, 1 / 6)
        r = sinkhorn(c, u, u, 0.01, max_iter=20000, tol=1e-9)
        exact = exact_ot_by_permutations(c)
        assert r.cost == pytest.approx(exact, rel=0.05)

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError, match="positive"):
            sinkhorn(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5], 0.0)

    def test_nonconvergence_flagged_not_raised(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(size=(8, 8))
        u = np.full(8, 1 / 8)
        r = sinkhorn(c, u, u, 0.001, max_iter=3, tol=1e-12)
        assert r.coupling.converged is False

    def test_marginals_when_converged(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            c = rng.uniform(size=(7, 9))
            a = np.full(7, 1 / 7)
            b = np.full(9, 1 / 9)
            r = sinkhorn(c, a, b, 0.05, max_iter=5000, tol=1e-7)
            assert r.coupling.converged
            plan = r.coupling.plan
            assert np.abs(plan.sum(axis=1) - a).max() < 1e-6
            assert np.abs(plan.sum(axis=0) - b).max() < 1e-6
            assert np.all(plan >= 0.0)

    def test_cost_nonnegative_for_nonnegative_cost(self):
        rng = np.random.default_rng(11)
        c = rng.uniform(size=(5, 5))
        r = sinkhorn(c, np.full(5, 0.2), np.full(5, 0.2), 0.1)
        assert r.cost >= -1e-9

    @pytest.mark.parametrize("seed", range(6))
    def test_stabilized_matches_lse(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(size=(12, 10))
        a = np.full(12, 1 / 12)
        b = np.full(10, 1 / 10)
        for eps in (0.5, 0.05, 0.005):
            r1 = sinkhorn_coupling(c, a, b, eps, max_iter=20000, tol=1e-10)
            r2 = sinkhorn_coupling(c, a, b, eps, max_iter=20000, tol=1e-10,
                                   stabilized=True)
            assert np.abs(r1.plan - r2.plan).max() < 1e-8

    def test_anneal_reaches_same_fixed_point(self):
        rng = np.random.default_rng(4)
        c = rng.uniform(size=(9, 9))
        u = np.full(9, 1 / 9)
        r1 = sinkhorn_coupling(c, u, u, 0.05, max_iter=50000, tol=1e-10)
        r2 = sinkhorn_coupling(c, u, u, 0.05, max_iter=50000, tol=1e-10, anneal=True)
        assert r1.converged and r2.converged
        assert np.abs(r1.plan - r2.plan).max() < 1e-6
        assert np.sum(r1.plan * c) == pytest.approx(np.sum(r2.plan * c), abs=1e-9)


class TestEnvelopeGradients:
    """Position gradients of the entropy-included value vs finite differences."""

    @pytest.mark.parametrize("metric", ["sq_euclidean", "euclidean"])
    def test_cross_term_gradient(self, metric):
        a = seeded_cloud(8, seed=31, scale=0.5)
        b = seeded_cloud(8, seed=32, scale=0.5)
        eps = 0.1
        kw = dict(max_iter=100000, tol=1e-9, anneal=True, stabilized=True)
        c = cross_cost(a, b, metric, "none").values
        r = sinkhorn(c, a.weights, b.weights, eps,
                     source_points=a.points, target_points=b.points, metric=metric,
                     **kw)
        assert r.coupling.converged

        def reg_value(flat):
            pts = flat.reshape(a.points.shape)
            cc = cross_cost(PointCloud.uniform(pts), b, metric, "none").values
            return sinkhorn(cc, a.weights, b.weights, eps, **kw).reg_cost

        num = finite_diff(reg_value, a.points, step=1e-5)
        denom = max(np.abs(num).max(), 1e-12)
        assert np.abs(r.grad_source - num).max() / denom <= 1e-3

    def test_divergence_gradient(self):
        a = seeded_cloud(8, seed=33, scale=0.5)
        b = seeded_cloud(8, seed=34, scale=0.5)
        eps = 0.1
        kw = dict(max_iter=100000, tol=1e-9, anneal=True, stabilized=True)
        res = sinkhorn_divergence(a, b, "sq_euclidean", eps, **kw)
        assert res.converged

        def value(flat):
            pts = flat.reshape(a.points.shape)
            return sinkhorn_divergence(PointCloud.uniform(pts), b, "sq_euclidean",
                                       eps, with_grads=False, **kw).value

        num = finite_diff(value, a.points, step=1e-5)
        denom = max(np.abs(num).max(), 1e-12)
        assert np.abs(res.grad_a - num).max() / denom <= 1e-3


class TestSinkhornDivergence:
    def test_self_divergence_zero(self):
        a = seeded_cloud(20, seed=40)
        res = sinkhorn_divergence(a, a, "sq_euclidean", 0.1)
        assert abs(res.value) <= 1e-8

    def test_symmetry(self):
        a = seeded_cloud(12, seed=41)
        b = seeded_cloud(12, seed=42)
        sab = sinkhorn_divergence(a, b, "sq_euclidean", 0.1, max_iter=50000, tol=1e-11,
                                  anneal=True, stabilized=True)
        sba = sinkhorn_divergence(b, a, "sq_euclidean", 0.1, max_iter=50000, tol=1e-11,
                                  anneal=True, stabilized=True)
        assert sab.value == pytest.approx(sba.value, abs=1e-9)

    def test_matches_three_term_assembly(self):
        # Independent reassembly of the debiasing formula from the plain
        # sinkhorn op (entropy-included values).
        a = seeded_cloud(64, seed=43)
        b = seeded_cloud(64, seed=44)
        eps = 0.1
        kw = dict(max_iter=50000, tol=1e-10, anneal=True, stabilized=True)
        res = sinkhorn_divergence(a, b, "sq_euclidean", eps, **kw)
        c_ab = cross_cost(a, b, "sq_euclidean", "none").values
        c_aa = pairwise_cost(a, "sq_euclidean", "none").values
        c_bb = pairwise_cost(b, "sq_euclidean", "none").values
        ot_ab = sinkhorn(c_ab, a.weights, b.weights, eps, **kw).reg_cost
        ot_aa = sinkhorn(c_aa, a.weights, a.weights, eps, **kw).reg_cost
        ot_bb = sinkhorn(c_bb, b.weights, b.weights, eps, **kw).reg_cost
        assert res.value == pytest.approx(ot_ab - 0.5 * ot_aa - 0.5 * ot_bb, abs=1e-7)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            sinkhorn_divergence(seeded_cloud(4, d=2, seed=0), seeded_cloud(4, d=3, seed=1))

    def test_nonconvergence_flagged(self):
        a = seeded_cloud(10, seed=45)
        b = seeded_cloud(10, seed=46)
        res = sinkhorn_divergence(a, b, "sq_euclidean", 0.001, max_iter=2, tol=1e-12)
        assert res.converged is False


class TestEntropicGw:
    def test_single_point(self):
        g = entropic_gw(np.zeros((1, 1)), np.zeros((1, 1)), [1.0], [1.0], 0.1)
        assert np.allclose(g.coupling.plan, [[1.0]])
        assert g.cost == pytest.approx(0.0, abs=1e-12)

    def test_identical_spaces_near_zero(self):
        # unit-diameter cloud, so scaled and unscaled costs coincide; the
        # identity-coupling upper bound is exactly 0
        raw = seeded_cloud(16, seed=50)
        diameter = pairwise_cost(raw, "euclidean", "none").values.max()
        cloud = PointCloud.uniform(raw.points / diameter)
        cm = pairwise_cost(cloud, "euclidean", "max")
        w = np.full(16, 1 / 16)
        g = entropic_gw(cm.values, cm.values, w, w, 0.001, outer_iter=100,
                        anneal=True, stabilized=True)
        assert g.cost * cm.scale_factor ** 2 <= 1e-3

    def test_epsilon_guard(self):
        with pytest.raises(ValueError, match="positive"):
            entropic_gw(np.zeros((2, 2)), np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5], -1.0)

    def test_upper_bounded_by_permutation_optimum_plus_bias(self):
        w = np.full(6, 1 / 6)
        for seed in range(4):
            x = seeded_cloud(6, seed=seed)
            y = seeded_cloud(6, seed=seed + 100)
            cx = pairwise_cost(x, "euclidean", "max").values
            cy = pairwise_cost(y, "euclidean", "max").values
            oracle = brute_force_gromov_monge(cx, cy).best_distortion_sq
            biases = []
            for eps in (0.1, 0.01, 0.001):
                g = entropic_gw(cx, cy, w, w, eps, outer_iter=300, tol=1e-8,
                                anneal=True, stabilized=True)
                biases.append(g.cost - oracle)
                assert g.cost <= oracle + max(biases[-1], 0.0) + 1e-12
            assert biases[2] <= biases[1] <= biases[0]
            assert biases[2] <= 0.05

    def test_relabeling_invariance(self):
        x = seeded_cloud(10, seed=51)
        y = seeded_cloud(10, seed=52)
        cx = pairwise_cost(x, "euclidean", "none").values
        cy = pairwise_cost(y, "euclidean", "none").values
        w = np.full(10, 0.1)
        g1 = entropic_gw(cx, cy, w, w, 0.05, outer_iter=200, tol=1e-8)
        perm = np.random.default_rng(5).permutation(10)
        g2 = entropic_gw(cx[np.ix_(perm, perm)], cy, w, w, 0.05, outer_iter=200, tol=1e-8)
        assert g1.cost == pytest.approx(g2.cost, abs=1e-5)

    def test_requires_symmetric(self):
        bad = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError, match="symmetric"):
            entropic_gw(bad, np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5], 0.1)


class TestDistortion:
    def test_identity_map_zero(self):
        cloud = seeded_cloud(9, seed=60)
        cx = pairwise_cost(cloud, "euclidean", "none")
        assert distortion_sq(cx, cloud).value == 0.0

    def test_rigid_image_zero(self):
        cloud = seeded_cloud(30, seed=61)
        image = apply_rigid(cloud, random_rotation(3, seed=62))
        cx = pairwise_cost(cloud, "euclidean", "none")
        assert abs(distortion_sq(cx, image).value) <= 1e-10

    def test_hand_arithmetic(self):
        src = PointCloud.uniform(np.array([[0.0], [1.0]]))
        mapped = PointCloud.uniform(np.array([[0.0], [3.0]]))
        cx = pairwise_cost(src, "euclidean", "none")
        assert distortion_sq(cx, mapped).value == pytest.approx(2.0, abs=1e-14)

    def test_size_mismatch(self):
        cx = pairwise_cost(seeded_cloud(5, seed=0), "euclidean", "none")
        with pytest.raises(ValueError, match="mismatch"):
            distortion_sq(cx, seeded_cloud(6, seed=1))

    @pytest.mark.parametrize("metric", ["sq_euclidean", "euclidean"])
    def test_gradient_matches_finite_differences(self, metric):
        src = seeded_cloud(10, seed=63)
        mapped = seeded_cloud(10, seed=64)
        cx = pairwise_cost(src, metric, "none")
        res = distortion_sq(cx, mapped)

        def value(flat):
            return distortion_sq(cx, PointCloud.uniform(flat.reshape(mapped.points.shape)),
                                 with_grad=False).value

        num = finite_diff(value, mapped.points, step=1e-6)
        denom = max(np.abs(num).max(), 1e-12)
        assert np.abs(res.grad_mapped - num).max() / denom <= 1e-6

    def test_rigid_image_zero_with_max_scaling(self):
        cloud = seeded_cloud(30, seed=65)
        image = apply_rigid(cloud, random_rotation(3, seed=66))
        cx = pairwise_cost(cloud, "euclidean", "max")
        assert abs(distortion_sq(cx, image).value) <= 1e-10


class TestGromovMongeGap:
    def test_identity_map(self):
        cloud = seeded_cloud(32, seed=70)
        res = gromov_monge_gap(cloud, cloud, "euclidean", 0.001, "max",
                               anneal=True, stabilized=True)
        assert abs(res.gap) <= 1e-6 or abs(res.gap) == pytest.approx(res.gw_cost)
        assert res.distortion == 0.0

    def test_rigid_map_small_gap(self):
        cloud = seeded_cloud(64, seed=71)
        image = apply_rigid(cloud, random_rotation(3, seed=72))
        res = gromov_monge_gap(cloud, image, "euclidean", 0.001, "max",
                               outer_iter=200, tol=1e-7, anneal=True, stabilized=True)
        assert abs(res.gap) <= 1e-3

    def test_exact_gap_nonnegative_over_bijections(self):
        x = seeded_cloud(5, seed=73)
        y = seeded_cloud(5, seed=74)
        cx = pairwise_cost(x, "euclidean", "none").values
        cy = pairwise_cost(y, "euclidean", "none").values
        oracle = brute_force_gromov_monge(cx, cy)
        n = 5
        for perm in itertools.permutations(range(n)):
            idx = np.asarray(perm)
            dis = float(np.sum((cx - cy[np.ix_(idx, idx)]) ** 2) / (n * n))
            assert dis - oracle.best_distortion_sq >= -1e-9

    def test_size_guard(self):
        with pytest.raises(ValueError, match="equal n"):
            gromov_monge_gap(seeded_cloud(4, seed=0), seeded_cloud(5, seed=1))

    def test_gradient_direction_reduces_gap(self):
        # sanity: a small step against the gradient should not increase the gap
        src = seeded_cloud(24, seed=75)
        mapped = PointCloud.uniform(
            apply_linear(src, random_shear(3, 0.6, seed=76)).points)
        res = gromov_monge_gap(src, mapped, "euclidean", 0.01, "max",
                               anneal=True, stabilized=True)
        stepped = PointCloud.uniform(mapped.points - 0.02 * res.grad_mapped
                                     / max(np.abs(res.grad_mapped).max(), 1e-12))
        res2 = gromov_monge_gap(src, stepped, "euclidean", 0.01, "max",
                                anneal=True, stabilized=True)
        assert res2.gap <= res.gap + 5e-3


class TestPlanPositionGrads:
    def test_coincident_points_zero_subgradient(self):
        x = np.zeros((2, 2))
        plan = np.full((2, 2), 0.25)
        gs, gt = plan_position_grads(plan, x, x, "euclidean")
        assert np.all(gs == 0.0) and np.all(gt == 0.0)
