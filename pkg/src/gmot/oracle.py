"""Brute-force ground truth for tiny instances.

Exact discrete distortion minimization over all permutations, the O(n^2 m^2)
quadratic cost sum, equality checks for the rigid-reference and composition
properties, and central finite differences. Everything here is deliberately
independent of the fast factorized paths it validates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import PointCloud, RigidTransform, apply_rigid, pairwise_cost

SIZE_LIMIT = 8


class SizeLimitError(ValueError):
    """Raised when a factorial-size enumeration would be too large."""


@dataclass
class GmOracleResult:
    best_permutation: tuple[int, ...]
    best_distortion_sq: float
    all_distortions: list[float] | None = None


def _permutation_distortion(cx: np.ndarray, cy: np.ndarray, perm) -> float:
    n = cx.shape[0]
    idx = np.asarray(perm)
    diff = cx - cy[np.ix_(idx, idx)]
    return float(np.sum(diff * diff) / (n * n))


def brute_force_gromov_monge(cx: np.ndarray, cy: np.ndarray,
                             keep_all: bool = False) -> GmOracleResult:
    """Exact minimum distortion over all n! point bijections.

    Uniform equal-size empirical measures admit exactly the bijections as
    transport maps, so full enumeration is the ground truth. Ties break
    lexicographically (enumeration order). Guarded at n <= 8.
    """
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    if cx.shape != cy.shape or cx.ndim != 2 or cx.shape[0] != cx.shape[1]:
        raise ValueError(f"need equal square cost matrices, got {cx.shape} and {cy.shape}")
    n = cx.shape[0]
    if n > SIZE_LIMIT:
        raise SizeLimitError(f"n={n} exceeds the enumeration guard n <= {SIZE_LIMIT}")
    best_val = np.inf
    best_perm: tuple[int, ...] | None = None
    all_vals: list[float] | None = [] if keep_all else None
    for perm in itertools.permutations(range(n)):
        val = _permutation_distortion(cx, cy, perm)
        if all_vals is not None:
            all_vals.append(val)
        if val < best_val:
            best_val = val
            best_perm = perm
    return GmOracleResult(best_perm, best_val, all_vals)


def gw_cost_naive(cx: np.ndarray, cy: np.ndarray, plan: np.ndarray) -> float:
    """Direct O(n^2 m^2) quadratic objective sum for a given coupling."""
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    n, m = plan.shape
    if cx.shape != (n, n) or cy.shape != (m, m):
        raise ValueError(f"size mismatch: plan {plan.shape}, cx {cx.shape}, cy {cy.shape}")
    if abs(plan.sum() - 1.0) > 1e-6 or np.any(plan < -1e-12):
        raise ValueError("plan must be a nonnegative matrix of total mass 1")
    total = 0.0
    for i in range(n):
        for j in range(m):
            pij = plan[i, j]
            if pij == 0.0:
                continue
            for k in range(n):
                for l in range(m):
                    d = cx[i, k] - cy[j, l]
                    total += d * d * pij * plan[k, l]
    return total


def permutation_plan(perm, n: int) -> np.ndarray:
    """Coupling matrix of the bijection i -> perm[i] on uniform weights."""
    plan = np.zeros((n, n))
    for i, j in enumerate(perm):
        plan[i, j] = 1.0 / n
    return plan


@dataclass
class EquivalenceReport:
    """Rigid-reference equality: optimal distortion from X and from rigid(X)."""

    gm_source_target: float
    gm_reference_target: float
    residual: float
    perm_source_target: tuple[int, ...]
    perm_reference_target: tuple[int, ...]
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "gm_source_target": self.gm_source_target,
            "gm_reference_target": self.gm_reference_target,
            "residual": self.residual,
            "perm_source_target": list(self.perm_source_target),
            "perm_reference_target": list(self.perm_reference_target),
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def reference_equivalence_check(x_cloud: PointCloud, rigid: RigidTransform,
                                y_target: PointCloud, metric: str = "euclidean",
                                tolerance: float = 1e-9) -> EquivalenceReport:
    """Verify the optimal distortion is unchanged by a rigid re-anchoring.

    Computes Z = rigid(X) and compares the exact minimum distortion X -> Y
    against Z -> Y on unscaled costs.
    """
    if x_cloud.n != y_target.n:
        raise ValueError(f"clouds must have equal n, got {x_cloud.n} and {y_target.n}")
    z_cloud = apply_rigid(x_cloud, rigid)
    cx = pairwise_cost(x_cloud, metric, "none").values
    cz = pairwise_cost(z_cloud, metric, "none").values
    cy = pairwise_cost(y_target, metric, "none").values
    gm_xy = brute_force_gromov_monge(cx, cy)
    gm_zy = brute_force_gromov_monge(cz, cy)
    residual = abs(gm_xy.best_distortion_sq - gm_zy.best_distortion_sq)
    return EquivalenceReport(gm_xy.best_distortion_sq, gm_zy.best_distortion_sq,
                             residual, gm_xy.best_permutation, gm_zy.best_permutation,
                             tolerance, bool(residual <= tolerance))


@dataclass
class CompositionReport:
    """Composed rigid-then-optimal correspondence vs the direct optimum."""

    gm_direct: float
    composed_distortion: float
    residual: float
    perm_direct: tuple[int, ...]
    perm_reference_target: tuple[int, ...]
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "gm_direct": self.gm_direct,
            "composed_distortion": self.composed_distortion,
            "residual": self.residual,
            "perm_direct": list(self.perm_direct),
            "perm_reference_target": list(self.perm_reference_target),
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def composition_optimality_check(x_cloud: PointCloud, rigid: RigidTransform,
                                 y_target: PointCloud, metric: str = "euclidean",
                                 tolerance: float = 1e-9) -> CompositionReport:
    """Verify composing the rigid relabeling with the reference-to-target
    optimal permutation attains the direct source-to-target optimum.

    apply_rigid keeps point order, so the rigid correspondence is the
    identity indexing and the composed map is x_i -> y_{sigma(i)} for the
    Z -> Y minimizer sigma.
    """
    if x_cloud.n != y_target.n:
        raise ValueError(f"clouds must have equal n, got {x_cloud.n} and {y_target.n}")
    z_cloud = apply_rigid(x_cloud, rigid)
    cx = pairwise_cost(x_cloud, metric, "none").values
    cz = pairwise_cost(z_cloud, metric, "none").values
    cy = pairwise_cost(y_target, metric, "none").values
    direct = brute_force_gromov_monge(cx, cy)
    relabel = brute_force_gromov_monge(cz, cy)
    composed = _permutation_distortion(cx, cy, relabel.best_permutation)
    residual = abs(composed - direct.best_distortion_sq)
    return CompositionReport(direct.best_distortion_sq, composed, residual,
                             direct.best_permutation, relabel.best_permutation,
                             tolerance, bool(residual <= tolerance))


def finite_diff(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                step: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of a deterministic scalar function.

    With `indices`, only those coordinates of the flattened parameter vector
    are probed (returned in that order); otherwise the full gradient is
    returned with the shape of `params`.
    """
    params = np.asarray(params, dtype=np.float64)
    flat = params.ravel().copy()
    coords = list(range(flat.size)) if indices is None else list(indices)
    out = np.zeros(len(coords))
    for pos, k in enumerate(coords):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = loss_fn(flat.reshape(params.shape))
        flat[k] = orig - step
        f_minus = loss_fn(flat.reshape(params.shape))
        flat[k] = orig
        out[pos] = (f_plus - f_minus) / (2.0 * step)
    if indices is None:
        return out.reshape(params.shape)
    return out
