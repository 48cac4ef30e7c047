"""Point clouds, intra/cross-space cost matrices, and the synthetic transforms.

A point cloud carries coordinates plus probability weights and stands for an
empirical measure (a uniform sum of Dirac masses in this project). Cost
matrices are Euclidean or squared-Euclidean pairwise costs, optionally
normalized by their mean or max entry; the applied scale factor is kept so
values can be unscaled later.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

METRICS = ("euclidean", "sq_euclidean")
SCALINGS = ("none", "mean", "max")

WEIGHT_SUM_TOL = 1e-12
ORTHOGONALITY_TOL = 1e-10
SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """Weighted points in R^d representing an empirical probability measure.

    Parameters
    ----------
    points : ndarray, shape (n, d)
        Point coordinates.
    weights : ndarray, shape (n,)
        Nonnegative masses summing to 1. Uniform 1/n everywhere in this
        project; the field allows general weights.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be a (n>=1, d>=1) matrix, got shape {pts.shape}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise ValueError(f"weights shape {w.shape} does not match n={pts.shape[0]}")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL}, got {w.sum()!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points: np.ndarray) -> "PointCloud":
        """Cloud with uniform weights 1/n."""
        pts = np.asarray(points, dtype=np.float64)
        n = pts.shape[0]
        if n < 1:
            raise ValueError("need at least one point")
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class CostMatrix:
    """Symmetric intra-space pairwise cost with its scaling bookkeeping."""

    values: np.ndarray
    metric: str
    scaling: str
    scale_factor: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"cost matrix must be square, got shape {v.shape}")
        if np.any(np.abs(np.diag(v)) > 0):
            raise ValueError("cost matrix must have a zero diagonal")
        if np.max(np.abs(v - v.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError(f"cost matrix must be symmetric within {SYMMETRY_TOL}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CrossCost:
    """Rectangular cross-space cost matrix with its scaling bookkeeping."""

    values: np.ndarray
    metric: str
    scaling: str
    scale_factor: float


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t with orthogonal R (an isometry of R^d)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError(f"rotation must be square, got shape {r.shape}")
        if t.shape != (r.shape[0],):
            raise ValueError(f"translation shape {t.shape} does not match d={r.shape[0]}")
        d = r.shape[0]
        if np.max(np.abs(r.T @ r - np.eye(d))) > ORTHOGONALITY_TOL:
            raise ValueError("rotation is not orthogonal within 1e-10")
        if abs(abs(np.linalg.det(r)) - 1.0) > ORTHOGONALITY_TOL:
            raise ValueError("rotation determinant must be +-1 within 1e-10")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def inverse(self) -> "RigidTransform":
        rinv = self.rotation.T
        return RigidTransform(rinv, -rinv @ self.translation)


@dataclass(frozen=True)
class ShearTransform:
    """x -> A x for an invertible, genuinely non-orthogonal matrix A."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"matrix must be square, got shape {a.shape}")
        if abs(np.linalg.det(a)) <= 1e-8:
            raise ValueError("shear matrix must be invertible (|det| > 1e-8)")
        gram_dev = np.max(np.abs(a.T @ a - np.eye(a.shape[0])))
        if gram_dev <= 1e-6:
            raise ValueError("shear matrix is orthogonal within 1e-6; the map must be non-rigid")
        object.__setattr__(self, "matrix", a)


def _raw_cross_values(xa: np.ndarray, xb: np.ndarray, metric: str) -> np.ndarray:
    # Gram-trick expansion; clip tiny negatives from cancellation.
    sq_a = np.sum(xa * xa, axis=1)
    sq_b = np.sum(xb * xb, axis=1)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (xa @ xb.T)
    np.maximum(d2, 0.0, out=d2)
    if metric == "sq_euclidean":
        return d2
    return np.sqrt(d2, out=d2)


def _scale_factor(values: np.ndarray, scaling: str) -> float:
    if scaling == "none":
        return 1.0
    if scaling == "mean":
        s = float(values.mean())
    elif scaling == "max":
        s = float(values.max())
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    # Degenerate all-zero matrix: skip scaling to avoid 0/0.
    return s if s > 0.0 else 1.0


def pairwise_cost(cloud: PointCloud, metric: str = "euclidean",
                  scaling: str = "none") -> CostMatrix:
    """Intra-space pairwise cost of a cloud, divided by its scale factor.

    Parameters
    ----------
    cloud : PointCloud
    metric : {'euclidean', 'sq_euclidean'}
    scaling : {'none', 'mean', 'max'}
        'mean' / 'max' divide by the mean / max entry so that statistic
        becomes 1; an all-zero matrix keeps scale_factor = 1.

    Returns
    -------
    CostMatrix
        Symmetric, zero diagonal, with the applied scale_factor recorded.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    v = _raw_cross_values(pts, pts, metric)
    np.fill_diagonal(v, 0.0)
    v = 0.5 * (v + v.T)
    s = _scale_factor(v, scaling)
    if s != 1.0:
        v = v / s
    return CostMatrix(v, metric, scaling, s)


def cross_cost(a: PointCloud, b: PointCloud, metric: str = "euclidean",
               scaling: str = "none") -> CrossCost:
    """Cross-space cost between two clouds of equal ambient dimension."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: first cloud has d={a.dim}, second has d={b.dim}")
    if not (np.all(np.isfinite(a.points)) and np.all(np.isfinite(b.points))):
        raise ValueError("point coordinates must be finite")
    v = _raw_cross_values(a.points, b.points, metric)
    s = _scale_factor(v, scaling)
    if s != 1.0:
        v = v / s
    return CrossCost(v, metric, scaling, s)


def apply_rigid(cloud: PointCloud, xf: RigidTransform) -> PointCloud:
    """Image of a cloud under x -> R x + t; weights unchanged."""
    if cloud.dim != xf.rotation.shape[0]:
        raise ValueError(f"dimension mismatch: cloud d={cloud.dim}, transform d={xf.rotation.shape[0]}")
    return PointCloud(cloud.points @ xf.rotation.T + xf.translation, cloud.weights)


def apply_linear(cloud: PointCloud, xf: ShearTransform | np.ndarray) -> PointCloud:
    """Image of a cloud under x -> A x; weights unchanged.

    Accepts a ShearTransform or a plain matrix (ShearTransform itself
    rejects orthogonal matrices, but applying one is still well defined).
    """
    a = xf.matrix if isinstance(xf, ShearTransform) else np.asarray(xf, dtype=np.float64)
    if cloud.dim != a.shape[0]:
        raise ValueError(f"dimension mismatch: cloud d={cloud.dim}, transform d={a.shape[0]}")
    return PointCloud(cloud.points @ a.T, cloud.weights)


def random_rotation(d: int, seed: int, translation_scale: float = 1.0) -> RigidTransform:
    """Seeded rigid transform: R uniform over SO(d), t uniform in a box.

    R is a QR-orthonormalized Gaussian matrix with the sign of diag(R fac)
    fixed (Haar distribution) and determinant flipped to +1 if needed.
    """
    if d < 2:
        raise ValueError(f"need d >= 2, got {d}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    t = translation_scale * rng.uniform(-1.0, 1.0, size=d)
    return RigidTransform(q, t)


def random_shear(d: int, magnitude: float, seed: int,
                 diag_range: tuple[float, float] | None = None) -> ShearTransform:
    """Seeded shear: identity plus one off-diagonal entry of given magnitude.

    With `diag_range`, composes with anisotropic diagonal scaling drawn from
    that interval, for a more severe non-rigid deformation.
    """
    if d < 2:
        raise ValueError(f"need d >= 2, got {d}")
    if not magnitude > 0:
        raise ValueError("magnitude must be positive")
    rng = np.random.default_rng(seed)
    i = int(rng.integers(0, d))
    j = int(rng.integers(0, d - 1))
    if j >= i:
        j += 1
    a = np.eye(d)
    a[i, j] = magnitude
    if diag_range is not None:
        lo, hi = diag_range
        a = np.diag(rng.uniform(lo, hi, size=d)) @ a
    return ShearTransform(a)


# ---------------------------------------------------------------------------
# Serialization: CSV (x0,...,x{d-1},weight) and ASCII PLY for 3D viewers.
# Floats are written with repr (shortest round-trip), so rewrites are
# byte-identical and round trips are exact.
# ---------------------------------------------------------------------------

def write_cloud_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{k}" for k in range(cloud.dim)] + ["weight"])
        for row, w in zip(cloud.points, cloud.weights):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(w))])


def read_cloud_csv(path) -> PointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "weight":
            raise ValueError(f"{path}: expected a trailing 'weight' column, got header {header}")
        d = len(header) - 1
        pts, ws = [], []
        for row in reader:
            if len(row) != d + 1:
                raise ValueError(f"{path}: row has {len(row)} fields, expected {d + 1}")
            pts.append([float(v) for v in row[:d]])
            ws.append(float(row[d]))
    return PointCloud(np.asarray(pts), np.asarray(ws))


def write_cloud_ply(cloud: PointCloud, path) -> None:
    if cloud.dim != 3:
        raise ValueError(f"PLY export requires 3D points, got d={cloud.dim}")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {cloud.n}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    for row in cloud.points:
        lines.append(" ".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cloud_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not an ASCII PLY file")
    n = None
    body_at = None
    for k, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            n = int(ln.split()[-1])
        if ln == "end_header":
            body_at = k + 1
            break
    if n is None or body_at is None:
        raise ValueError(f"{path}: malformed PLY header")
    pts = [[float(v) for v in lines[body_at + i].split()] for i in range(n)]
    return PointCloud.uniform(np.asarray(pts))
