"""Point-cloud containers plus the metric and normalization operations built on them.

Coordinates are millimetres in a right-handed frame unless a function says
otherwise.  A cloud is an (N, 3) float64 array wrapped in :class:`PointCloud`
together with optional per-point unit normals and integer timestamps
(contact-sequence indices, non-decreasing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCloud,
    DegenerateNeighborhood,
    EmptyCloud,
    NormalizationUndefined,
    TooFewPoints,
)

UNIT_TOL = 1e-6


def as_unit(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Return v normalized to unit length, raising ValueError on a zero vector."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < tol:
        raise ValueError(f"cannot normalize near-zero vector (norm={n:g})")
    return v / n


@dataclass
class Pose:
    """Rigid transform: rotation (3, 3) then translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:g})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant (reflection)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """Return self applied after other: (self * other)(p) = self(other(p))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


@dataclass
class PointCloud:
    """Points with optional unit normals and optional per-point timestamps.

    Invariants enforced on construction: finite coordinates, normals unit
    length within 1e-6, timestamps non-decreasing integers.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("cloud contains non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape does not match points")
            norms = np.linalg.norm(self.normals, axis=1)
            if self.normals.size and np.abs(norms - 1.0).max() > UNIT_TOL:
                raise ValueError("normals are not unit length")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
            if self.timestamps.shape[0] != self.points.shape[0]:
                raise ValueError("timestamps length does not match points")
            if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) < 0):
                raise ValueError("timestamps must be non-decreasing")

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, indices) -> "PointCloud":
        """Sub-cloud at the given indices (order preserved as passed)."""
        idx = np.asarray(indices)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.timestamps is None else self.timestamps[idx],
        )

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.timestamps is None else self.timestamps.copy(),
        )


@dataclass
class NormalizationParams:
    """Inverse data for Eq-style cloud normalization: scale = lam * sigma."""

    lam: float
    mean: np.ndarray
    sigma: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def scale(self) -> float:
        return self.lam * self.sigma


def _points_of(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


def merge_clouds(clouds: Iterable[PointCloud]) -> PointCloud:
    """Concatenate clouds; normals/timestamps kept only if every part has them."""
    clouds = [c for c in clouds if len(c) > 0]
    if not clouds:
        raise EmptyCloud("nothing to merge")
    points = np.concatenate([c.points for c in clouds])
    normals = None
    if all(c.normals is not None for c in clouds):
        normals = np.concatenate([c.normals for c in clouds])
    timestamps = None
    if all(c.timestamps is not None for c in clouds):
        timestamps = np.concatenate([c.timestamps for c in clouds])
    return PointCloud(points, normals, timestamps)


def transform_cloud(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply a rigid transform to points (and normals); timestamps unchanged."""
    return PointCloud(
        pose.apply(cloud.points),
        None if cloud.normals is None else cloud.normals @ pose.rotation.T,
        None if cloud.timestamps is None else cloud.timestamps.copy(),
    )


def normalize_cloud(cloud: PointCloud, lam: float = 1.0):
    """Center the cloud and divide by lam times the std of centered-point norms.

    Returns (normalized_cloud, NormalizationParams).  The output has zero mean
    and the standard deviation of its point norms equals 1/lam.

    Raises:
        DegenerateCloud: fewer than 2 points, or all points coincide.
        NormalizationUndefined: points differ but their centered norms all
            agree (e.g. two antipodal points), so the scale is undefined.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    pts = cloud.points
    if pts.shape[0] < 2:
        raise DegenerateCloud(f"need at least 2 points, got {pts.shape[0]}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    norms = np.linalg.norm(centered, axis=1)
    max_norm = float(norms.max())
    if max_norm == 0.0:
        raise DegenerateCloud("all points coincide")
    sigma = float(norms.std())
    if sigma < 1e-12 * max(1.0, max_norm):
        raise NormalizationUndefined(
            "centered point norms have zero spread; scale is undefined")
    out = PointCloud(
        centered / (lam * sigma),
        None if cloud.normals is None else cloud.normals.copy(),
        None if cloud.timestamps is None else cloud.timestamps.copy(),
    )
    return out, NormalizationParams(lam, mean, sigma)


def denormalize_cloud(cloud: PointCloud, params: NormalizationParams) -> PointCloud:
    """Invert normalize_cloud: scale back by lam*sigma and restore the mean."""
    return PointCloud(
        cloud.points * params.scale + params.mean,
        None if cloud.normals is None else cloud.normals.copy(),
        None if cloud.timestamps is None else cloud.timestamps.copy(),
    )


def _nearest_distances(queries: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Exact nearest-neighbor distances from each query to the target set.

    Distances are recomputed from the matched indices so they agree bit-for-bit
    with a brute-force scan.
    """
    tree = cKDTree(targets)
    _, idx = tree.query(queries, k=1)
    return np.linalg.norm(queries - targets[idx], axis=1)


def chamfer_distance(a: Union[PointCloud, np.ndarray],
                     b: Union[PointCloud, np.ndarray]) -> float:
    """Symmetric Chamfer distance: half-sum of mean nearest-neighbor distances.

    Unsquared; units follow the inputs.  Zero iff the two point sets are equal.
    """
    pa, pb = _points_of(a), _points_of(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptyCloud("chamfer_distance requires two non-empty clouds")
    d_ab = _nearest_distances(pa, pb).mean()
    d_ba = _nearest_distances(pb, pa).mean()
    return 0.5 * (float(d_ab) + float(d_ba))


def coverage_distances(points: Union[PointCloud, np.ndarray],
                       measured: Union[PointCloud, np.ndarray]) -> np.ndarray:
    """Exact distance from each point to its nearest measured point."""
    pts, meas = _points_of(points), _points_of(measured)
    if pts.shape[0] == 0 or meas.shape[0] == 0:
        raise EmptyCloud("coverage requires non-empty clouds")
    return _nearest_distances(pts, meas)


def coverage_distance(p: np.ndarray, measured: Union[PointCloud, np.ndarray]) -> float:
    """Distance from a single point to the nearest measured point."""
    return float(coverage_distances(np.asarray(p, dtype=np.float64).reshape(1, 3),
                                    measured)[0])


def rms_radius(cloud: Union[PointCloud, np.ndarray]) -> float:
    """Root-mean-square distance of points from their centroid.

    This is the scale used to report dimensionless (scale-free) distances.
    """
    pts = _points_of(cloud)
    if pts.shape[0] == 0:
        raise EmptyCloud("rms_radius of an empty cloud")
    centered = pts - pts.mean(axis=0)
    return float(np.sqrt((centered ** 2).sum(axis=1).mean()))


def voxel_volume(cloud: Union[PointCloud, np.ndarray], resolution: float) -> float:
    """Volume of the occupied voxel set at the given resolution (mm^3).

    A point occupies the voxel floor(coord / resolution) per axis; duplicates
    and ordering do not change the result.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    pts = _points_of(cloud)
    if pts.shape[0] == 0:
        return 0.0
    idx = np.floor(pts / resolution).astype(np.int64)
    n_occ = np.unique(idx, axis=0).shape[0]
    return float(n_occ) * resolution ** 3


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from the smallest principal axis of local covariance.

    The neighborhood of a point is itself plus its k nearest neighbors.  Signs
    are oriented away from the cloud centroid; when a point sits exactly in
    the centroid plane the eigenvector sign is kept as computed.

    Returns a new cloud with normals attached.

    Raises:
        TooFewPoints: cloud smaller than k + 1.
        DegenerateNeighborhood: a neighborhood with zero spatial spread.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    pts = cloud.points
    n = pts.shape[0]
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points for k={k}, got {n}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    hoods = pts[idx]                       # (n, k+1, 3)
    hoods = hoods - hoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", hoods, hoods) / (k + 1)
    vals, vecs = np.linalg.eigh(cov)
    if np.any(vals[:, 2] < 1e-18):
        raise DegenerateNeighborhood("a neighborhood has zero spatial spread")
    normals = vecs[:, :, 0]
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / lens
    outward = pts - pts.mean(axis=0)
    flip = np.einsum("ni,ni->n", normals, outward) < 0.0
    normals[flip] *= -1.0
    return PointCloud(pts.copy(), normals,
                      None if cloud.timestamps is None else cloud.timestamps.copy())
