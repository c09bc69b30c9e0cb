"""Shape completion: dense belief clouds predicted from partial contacts.

The reference completer fits primitive surfaces (sphere, cylinder,
ellipsoid, box) to the normalized contact cloud, picks the best class,
perturbs its parameters within the fit posterior along a deterministic
coverage-keyed draw, and resamples that surface into a dense novel
point set.
Fitting runs in a canonical frame derived covariantly from the data
moments, so rotating the measurements rotates the belief.  An
exchange-directory adapter lets an external learned completer replace
the reference path without touching the loop.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import least_squares
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import (
    CompletionTimeout,
    ContractViolation,
    DegenerateConfiguration,
    TooFewPoints,
)
from .geometry import (
    NormalizationParams,
    PointCloud,
    Pose,
    denormalize_cloud,
    normalize_cloud,
)
from .primitives import PrimitiveShape, sample_surface, signed_distance

MIN_FIT_POINTS = 8
FIT_SUBSAMPLE = 4000
FIT_MAX_NFEV = 60
NORMAL_WEIGHT = 0.5
DIM_PULL = 1e-3
# posterior perturbation: measurement noise, loose-parameter priors, and
# the noise correlation length are all fractions of the fitted shape's
# largest dimension, so the belief rescales with the input; rotation is
# near-pinned because orientation freedom on a symmetric body only
# shuffles sample points along the surface
NOISE_REL = 0.002
PRIOR_CENTER_STD = 1.0
PRIOR_ROT_STD = 0.01
PRIOR_DIM_STD = 0.03
CORR_REL = 0.15
# model error decays with covered surface, not with parameter pinning:
# a belief from a few pinning patches is still a guess about everything
# between them, so its pose and extents wobble until the accumulated
# cloud occupies clearly more cells than COV_N0; cells match the voxel
# pitch of the contact-volume metric, so coverage is counted at the
# same resolution the pipeline reports
COV_PITCH_MM = 1.0
COV_N0 = 10.0
GATE_MAX = 3.0
MODEL_ERR = 0.02
MODEL_ERR_DIM = 0.5
# side filter applies only while the patch is one-sided enough to orient;
# a full hemisphere has mean-normal norm 0.5, multi-side coverage far less
SIDE_FILTER_MIN_NORMAL = 0.3
FIT_CLASSES = ("sphere", "cylinder", "ellipsoid", "box")
_PARSIMONY = {"sphere": 0, "cylinder": 1, "ellipsoid": 2, "box": 3}
TIE_FRACTION = 0.05


@dataclass
class CompleterInput:
    """Normalized contact cloud (with normals) plus the transform used."""

    cloud: PointCloud
    norm: NormalizationParams

    def __post_init__(self):
        if self.cloud.normals is None:
            raise ValueError("completer input requires normals")
        pts = self.cloud.points
        center = np.linalg.norm(pts.mean(axis=0))
        sigma = float(np.std(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
        if center > 1e-6 or abs(sigma - 1.0 / self.norm.lam) > 1e-6:
            raise ValueError(
                f"cloud is not normalized (|mean|={center:g}, sigma={sigma:g})")


def completer_input(cloud: PointCloud, lam: float = 1.0) -> CompleterInput:
    """Normalize a measured contact cloud for completion."""
    normalized, params = normalize_cloud(cloud, lam)
    return CompleterInput(normalized, params)


@dataclass
class BeliefState:
    """Predicted dense cloud in the base frame plus fit diagnostics."""

    cloud: PointCloud
    diagnostics: dict = field(default_factory=dict)
    generation: int = 0


@dataclass
class FitResult:
    shape_class: str
    shape: PrimitiveShape
    residual: float
    inlier_fraction: float


def _subsample(points, normals, seed):
    """Deterministic uniform subsample capping the fit cost."""
    n = len(points)
    if n <= FIT_SUBSAMPLE:
        return points, normals
    idx = np.random.default_rng(seed).choice(n, FIT_SUBSAMPLE, replace=False)
    idx.sort()
    return points[idx], None if normals is None else normals[idx]


def _coplanarity(points) -> float:
    """Smallest/largest covariance eigenvalue ratio; 0 for a plane."""
    d = points - points.mean(axis=0)
    vals = np.linalg.eigvalsh(d.T @ d / len(d))
    top = float(vals[-1])
    if top <= 0.0:
        return 0.0
    return float(max(vals[0], 0.0) / top)


def _fit_sphere_init(points):
    if _coplanarity(points) < 1e-9:
        raise DegenerateConfiguration("coplanar points cannot fix a sphere")
    a = np.concatenate([2.0 * points, np.ones((len(points), 1))], axis=1)
    b = (points ** 2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center, k = sol[:3], float(sol[3])
    r2 = k + float(center @ center)
    if r2 <= 0.0:
        raise DegenerateConfiguration("algebraic sphere fit collapsed")
    return center, float(np.sqrt(r2))


def _fit_sphere(points) -> PrimitiveShape:
    center, r = _fit_sphere_init(points)

    def resid(x):
        return np.linalg.norm(points - x[:3], axis=1) - x[3]

    sol = least_squares(resid, np.concatenate([center, [r]]),
                        max_nfev=FIT_MAX_NFEV)
    c, radius = sol.x[:3], abs(float(sol.x[3]))
    return PrimitiveShape.ball(radius, pose=Pose(np.eye(3), c))


def _shape_from_params(kind, x):
    center = x[:3]
    rot = Rotation.from_rotvec(x[3:6]).as_matrix()
    dims = x[6:9]
    return PrimitiveShape(kind, dims, Pose(rot, center))


def _quick_distance(shape, points):
    """First-order distance and outward gradient, no iterative projection.

    Exact for spheres and boxes; for ellipsoids and elliptical cylinders
    this is the normalized algebraic distance, which vanishes exactly on
    the surface, so fits of clean data share their optimum with the exact
    metric.  Fit loops call this; reported residuals stay exact.
    """
    rot = shape.pose.rotation
    q = (points - shape.pose.translation) @ rot
    if shape.kind == "ball":
        a = shape.dims
        s = q / a
        g = np.maximum(np.linalg.norm(s, axis=1), 1e-12)
        grad = s / (a * g[:, None])
        gn = np.maximum(np.linalg.norm(grad, axis=1), 1e-12)
        d = (g - 1.0) / gn
        return d, (grad / gn[:, None]) @ rot.T
    if shape.kind == "cylinder":
        rx, ry, h = shape.dims
        s = q[:, :2] / (rx, ry)
        g = np.maximum(np.linalg.norm(s, axis=1), 1e-12)
        grad2 = s / (np.array([rx, ry]) * g[:, None])
        gn = np.maximum(np.linalg.norm(grad2, axis=1), 1e-12)
        dr = (g - 1.0) / gn
        nr = grad2 / gn[:, None]
        dz = np.abs(q[:, 2]) - 0.5 * h
        sz = np.where(q[:, 2] < 0.0, -1.0, 1.0)
        outside = (dr > 0.0) | (dz > 0.0)
        drp = np.maximum(dr, 0.0)
        dzp = np.maximum(dz, 0.0)
        d_out = np.hypot(drp, dzp)
        d = np.where(outside, d_out, np.maximum(dr, dz))
        safe = np.maximum(d_out, 1e-12)
        wr = np.where(outside, drp / safe, (dr >= dz).astype(np.float64))
        wz = np.where(outside, dzp / safe, (dr < dz).astype(np.float64))
        n_local = np.concatenate([nr * wr[:, None], (sz * wz)[:, None]],
                                 axis=1)
        ln = np.maximum(np.linalg.norm(n_local, axis=1, keepdims=True), 1e-12)
        return d, (n_local / ln) @ rot.T
    half = 0.5 * shape.dims
    e = np.abs(q) - half
    ep = np.maximum(e, 0.0)
    d_out = np.linalg.norm(ep, axis=1)
    inner = e.max(axis=1)
    d = np.where(inner > 0.0, d_out, inner)
    sq = np.where(q < 0.0, -1.0, 1.0)
    n_out = ep * sq
    rows = np.arange(len(q))
    face = e.argmax(axis=1)
    n_in = np.zeros_like(q)
    n_in[rows, face] = sq[rows, face]
    n_local = np.where((inner > 0.0)[:, None], n_out, n_in)
    ln = np.maximum(np.linalg.norm(n_local, axis=1, keepdims=True), 1e-12)
    return d, (n_local / ln) @ rot.T


def _fit_residual(kind, x, points, normals, dims0):
    shape = _shape_from_params(kind, np.concatenate([x[:6], np.abs(x[6:9])]))
    d, m = _quick_distance(shape, points)
    pull = DIM_PULL * (np.abs(x[6:9]) - dims0)
    if normals is None:
        return np.concatenate([d, pull])
    return np.concatenate(
        [d, NORMAL_WEIGHT * (1.0 - (m * normals).sum(axis=1)), pull])


def _refine_shape(kind, x0, points, normals):
    """Joint distance + normal-alignment least squares.

    Extents with no opposing contacts are flat directions of the problem;
    a weak pull toward the initial guess pins them there instead of letting
    the solver wander, without measurably biasing constrained extents.
    """
    dims0 = np.abs(x0[6:9])
    sol = least_squares(lambda x: _fit_residual(kind, x, points, normals,
                                                dims0),
                        x0, max_nfev=FIT_MAX_NFEV)
    x = sol.x
    return _shape_from_params(kind, np.concatenate([x[:6], np.abs(x[6:9])]))


def _fit_ellipsoid(points, normals) -> PrimitiveShape:
    center, r = _fit_sphere_init(points)
    x0 = np.concatenate([center, np.zeros(3), [r, r, r]])
    return _refine_shape("ball", x0, points, normals)


def _fit_cylinder(points, normals) -> PrimitiveShape:
    if normals is None:
        raise ValueError("cylinder fitting needs normals")
    _, svals, vt = np.linalg.svd(normals, full_matrices=False)
    if svals[0] <= 0.0 or svals[1] / svals[0] < 1e-8:
        raise DegenerateConfiguration(
            "normals span a single direction; cylinder axis undetermined")
    axis = vt[2]
    # in-plane circle through the projected points
    ref = np.array([1.0, 0.0, 0.0])
    if abs(axis @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    q = np.stack([points @ u, points @ v], axis=1)
    a = np.concatenate([2.0 * q, np.ones((len(q), 1))], axis=1)
    b = (q ** 2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    c2, k = sol[:2], float(sol[2])
    r2 = k + float(c2 @ c2)
    if r2 <= 0.0:
        raise DegenerateConfiguration("cylinder cross-section fit collapsed")
    radius = float(np.sqrt(r2))
    h = points @ axis
    height = max(float(h.max() - h.min()), 1e-3)
    center = c2[0] * u + c2[1] * v + 0.5 * float(h.max() + h.min()) * axis
    rot = np.stack([u, v, axis], axis=1)
    x0 = np.concatenate([center, Rotation.from_matrix(rot).as_rotvec(),
                         [radius, radius, height]])
    return _refine_shape("cylinder", x0, points, normals)


def _cluster_normals(normals, cos_tol=0.9):
    """Greedy direction clustering; returns (unit mean, member index array)."""
    clusters: List[list] = []
    means: List[np.ndarray] = []
    for i, n in enumerate(normals):
        placed = False
        for j, m in enumerate(means):
            if n @ m > cos_tol:
                clusters[j].append(i)
                s = normals[clusters[j]].sum(axis=0)
                means[j] = s / np.linalg.norm(s)
                placed = True
                break
        if not placed:
            clusters.append([i])
            means.append(n.copy())
    order = np.argsort([-len(c) for c in clusters], kind="stable")
    return [(means[j], np.array(clusters[j])) for j in order]


def _box_extents(axes, points, clusters):
    """Center and half-extents along given axes from face clusters/spans.

    An axis with only one face seen gets the largest confirmed extent as
    its guess (bodies in a family tend to be regular); exploration later
    contacts the real far side and the fit corrects itself.
    """
    faces = []
    for i in range(3):
        axis = axes[:, i]
        s = points @ axis
        plus = minus = None
        for mean, idx in clusters:
            d = float(mean @ axis)
            if d > 0.7 and plus is None:
                plus = float(s[idx].mean())
            elif d < -0.7 and minus is None:
                minus = float(s[idx].mean())
        span_half = max(0.5 * float(s.max() - s.min()), 1e-3)
        faces.append((s, plus, minus, span_half))
    confirmed = [0.5 * (p - m) for _, p, m, _ in faces
                 if p is not None and m is not None]
    h_guess = max(confirmed) if confirmed else None
    center = np.zeros(3)
    half = np.zeros(3)
    for i, (s, plus, minus, span_half) in enumerate(faces):
        if plus is not None and minus is not None:
            ci = 0.5 * (plus + minus)
            hi = max(0.5 * (plus - minus), 1e-3)
        elif plus is not None:
            hi = max(span_half, h_guess or 0.0)
            ci = plus - hi
        elif minus is not None:
            hi = max(span_half, h_guess or 0.0)
            ci = minus + hi
        else:
            ci = 0.5 * float(s.max() + s.min())
            hi = span_half
        center = center + ci * axes[:, i]
        half[i] = hi
    return center, half


def _cluster_frame(points, normals, clusters):
    u1 = clusters[0][0]
    u2 = None
    for mean, _ in clusters[1:]:
        if abs(mean @ u1) < 0.7:
            u2 = mean - (mean @ u1) * u1
            u2 /= np.linalg.norm(u2)
            break
    if u2 is None:
        # single visible face: in-plane principal direction fixes the frame
        d = points - points.mean(axis=0)
        d = d - np.outer(d @ u1, u1)
        _, _, vt = np.linalg.svd(d, full_matrices=False)
        u2 = vt[0] - (vt[0] @ u1) * u1
        nrm = np.linalg.norm(u2)
        if nrm < 1e-12:
            raise DegenerateConfiguration("box frame undetermined")
        u2 /= nrm
    return np.stack([u1, u2, np.cross(u1, u2)], axis=1)


def _pca_frame(points):
    d = points - points.mean(axis=0)
    _, vecs = np.linalg.eigh(d.T @ d / len(d))
    axes = vecs[:, ::-1]
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes


def _fit_box(points, normals) -> PrimitiveShape:
    """Two deterministic starts; the exact-residual winner keeps the fit
    from hopping between local basins as the cloud grows."""
    if normals is None:
        raise ValueError("box fitting needs normals")
    clusters = _cluster_normals(normals)
    best = None
    best_err = float("inf")
    for axes in (_cluster_frame(points, normals, clusters),
                 _pca_frame(points)):
        center, half = _box_extents(axes, points, clusters)
        x0 = np.concatenate([center, Rotation.from_matrix(axes).as_rotvec(),
                             2.0 * half])
        shape = _refine_shape("box", x0, points, normals)
        err = float(np.abs(signed_distance(shape, points)).mean())
        if err < best_err:
            best, best_err = shape, err
    return best


def fit_primitive(shape_class: str, cloud: PointCloud,
                  inlier_tol: Optional[float] = None,
                  seed: int = 0) -> FitResult:
    """Least-squares fit of one shape class to the cloud.

    Residual is the mean |sdf| over inliers in the cloud's own units; the
    inlier band defaults to 5% of the cloud rms radius.
    """
    if shape_class not in FIT_CLASSES:
        raise ValueError(f"unknown shape class: {shape_class!r}")
    points = cloud.points
    if len(points) < MIN_FIT_POINTS:
        raise TooFewPoints(f"need >= {MIN_FIT_POINTS} points")
    if inlier_tol is None:
        d = points - points.mean(axis=0)
        inlier_tol = 0.05 * float(np.sqrt((d ** 2).sum(axis=1).mean()))
    sub_pts, sub_nrm = _subsample(points, cloud.normals, seed)
    if shape_class == "sphere":
        shape = _fit_sphere(sub_pts)
    elif shape_class == "ellipsoid":
        shape = _fit_ellipsoid(sub_pts, sub_nrm)
    elif shape_class == "cylinder":
        shape = _fit_cylinder(sub_pts, sub_nrm)
    else:
        shape = _fit_box(sub_pts, sub_nrm)
    dist = np.abs(signed_distance(shape, points))
    inliers = dist <= inlier_tol
    frac = float(inliers.mean())
    residual = float(dist[inliers].mean()) if inliers.any() else float("inf")
    return FitResult(shape_class, shape, residual, frac)


def select_model(fits: Sequence[FitResult]) -> FitResult:
    """Lowest residual wins; near-ties go to the simpler class."""
    if not fits:
        raise ValueError("no fits to select from")
    best = min(f.residual for f in fits)
    cutoff = best * (1.0 + TIE_FRACTION)
    tied = [f for f in fits if f.residual <= cutoff]
    return min(tied, key=lambda f: _PARSIMONY[f.shape_class])


def _canonical_frame(points, normals) -> np.ndarray:
    """Rotation built from data moments; rotates covariantly with the input."""
    d = points - points.mean(axis=0)
    cov = d.T @ d / len(d)
    skew = (d * (d ** 2).sum(axis=1)[:, None]).mean(axis=0)
    nbar = normals.mean(axis=0)

    def pick(cands, against=None):
        for v in cands:
            if against is not None:
                v = v - (v @ against) * against
            if np.linalg.norm(v) > 1e-8:
                return v / np.linalg.norm(v)
        return None

    z = pick([nbar, skew, cov @ nbar])
    if z is None:
        z = np.array([0.0, 0.0, 1.0])
    x = pick([skew, cov @ z, nbar], against=z)
    if x is None:
        ref = np.array([1.0, 0.0, 0.0])
        if abs(z @ ref) > 0.9:
            ref = np.array([0.0, 1.0, 0.0])
        x = np.cross(ref, z)
        x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


_PROBE_A = np.array([0.62478, 0.41231, 0.55107])
_PROBE_A /= np.linalg.norm(_PROBE_A)
_PROBE_B = np.array([-0.27415, 0.59832, 0.40227])
_PROBE_B /= np.linalg.norm(_PROBE_B)
# wide enough that posterior draw jitter on equal dims cannot flip the
# branch, far below any deliberately unequal suite aspect ratio
TIE_REL = 0.04


def _signed(v, probe):
    return v if float(v @ probe) >= 0.0 else -v


def _perp_from(probe, z):
    x = probe - (probe @ z) * z
    n = np.linalg.norm(x)
    if n < 1e-6:
        alt = _PROBE_B if probe is _PROBE_A else _PROBE_A
        x = alt - (alt @ z) * z
        n = np.linalg.norm(x)
    return x / n


def _spheroid_placement(axis, radius, height, center):
    z = _signed(axis, _PROBE_A)
    x = _perp_from(_PROBE_B, z)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return PrimitiveShape("ball", np.array([radius, radius, height]),
                          Pose(rot, center))


def _stable_placement(shape: PrimitiveShape) -> PrimitiveShape:
    """Re-express a fitted shape so its pose depends on the surface alone.

    Fitters return poses with arbitrary axis order, sign, and (for round
    cross-sections) azimuth.  Sampling must not inherit that arbitrariness,
    or two fits of the same surface produce unrelated clouds: symmetric
    degrees of freedom are dropped and the rest are ordered and sign-fixed
    against fixed probe directions.
    """
    rot = shape.pose.rotation
    dims = shape.dims
    center = shape.pose.translation
    if shape.kind == "ball":
        order = np.argsort(-dims, kind="stable")
        d = dims[order]
        tie01 = (d[0] - d[1]) <= TIE_REL * d[0]
        tie12 = (d[1] - d[2]) <= TIE_REL * d[1]
        if tie01 and tie12:
            r = float(d.mean())
            return PrimitiveShape("ball", np.full(3, r),
                                  Pose(np.eye(3), center))
        if tie01:
            return _spheroid_placement(rot[:, order[2]],
                                       0.5 * (d[0] + d[1]), d[2], center)
        if tie12:
            return _spheroid_placement(rot[:, order[0]],
                                       0.5 * (d[1] + d[2]), d[0], center)
        a0 = _signed(rot[:, order[0]], _PROBE_A)
        a1 = _signed(rot[:, order[1]], _PROBE_B)
        return PrimitiveShape("ball", d.copy(),
                              Pose(np.stack([a0, a1, np.cross(a0, a1)],
                                            axis=1), center))
    if shape.kind == "cylinder":
        z = _signed(rot[:, 2], _PROBE_A)
        rx, ry, h = dims
        if abs(rx - ry) <= TIE_REL * max(rx, ry):
            r = 0.5 * (rx + ry)
            x = _perp_from(_PROBE_B, z)
            new_dims = np.array([r, r, h])
        else:
            i = 0 if rx >= ry else 1
            x = _signed(rot[:, i], _PROBE_B)
            new_dims = np.array([max(rx, ry), min(rx, ry), h])
        y = np.cross(z, x)
        return PrimitiveShape("cylinder", new_dims,
                              Pose(np.stack([x, y, z], axis=1), center))
    signed = [(s * rot[:, i], i) for i in range(3) for s in (1.0, -1.0)]
    a0, i0 = max(signed, key=lambda t: float(t[0] @ _PROBE_A))
    rest = [t for t in signed if t[1] != i0]
    a1, i1 = max(rest, key=lambda t: float(t[0] @ _PROBE_B))
    i2 = 3 - i0 - i1
    new_dims = np.array([dims[i0], dims[i1], dims[i2]])
    return PrimitiveShape("box", new_dims,
                          Pose(np.stack([a0, a1, np.cross(a0, a1)], axis=1),
                               center))


def _shape_params(shape: PrimitiveShape) -> np.ndarray:
    return np.concatenate([
        shape.pose.translation,
        Rotation.from_matrix(shape.pose.rotation).as_rotvec(),
        shape.dims])


def _row_weights(points, corr: float) -> np.ndarray:
    """Independence weights from local crowding.

    Contacts within one correlation length share a registration error, so
    evidence counts correlation balls, not points.  Weighting each point
    by the inverse of its neighbor count inside that radius makes a patch
    sum to its footprint (area over corr squared, or length over corr for
    a trace) no matter how densely it is sampled.
    """
    if corr <= 0.0 or len(points) < 2:
        return np.ones(len(points))
    counts = cKDTree(points).query_ball_point(points, r=corr,
                                              return_length=True)
    return 1.0 / np.maximum(counts, 1)


def _evidence_draw(points, pitch: float):
    """Coverage count and a draw that moves only when the evidence does.

    The cloud is bucketed into sensor-resolution cells and the draw is
    seeded from a digest of the occupied-cell set.  An interaction that
    only re-touches known surface reproduces the set exactly and leaves
    the draw still; one that reaches any fresh cell reseeds it whole.
    Returns the cell count and 18 standard normal components.
    """
    cells = np.unique(np.floor(points / pitch).astype(np.int64), axis=0)
    digest = hashlib.sha256(np.ascontiguousarray(cells).tobytes()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return len(cells), rng.standard_normal(18)


def _posterior_shape(shape: PrimitiveShape, points, normals, draw,
                     corr: float = 0.0, coverage: int = 1):
    """One Laplace-posterior perturbation of the fitted shape parameters.

    The fit is a point estimate of an uncertain surface.  Offsetting the
    parameters by L^-T z, with L the Cholesky factor of the posterior
    precision (J'J / s^2 + prior), makes consecutive beliefs differ
    exactly where the contacts leave the surface free: an extent with no
    opposing contact keeps its prior spread, a measured one is pinned
    near the noise floor.  On top of that sits a model-error wobble of
    the pose and extents: pinning says where the touched patches are,
    but how the surface runs between them stays a guess until the cloud
    has actually covered space, so the wobble amplitude decays with the
    occupied-cell count rather than with the posterior width.  Both
    terms take their direction from the coverage-keyed draw, so the
    belief settles exactly when interactions stop reaching fresh
    surface.  Extent columns use a wide forward secant (does growing
    this extent by 10 percent hurt the data?): contacts at the rim of
    the covered region resist growth only over a vanishing range, so the
    secant frees them, while an opposing face keeps resisting and stays
    pinned.
    """
    x = _shape_params(shape)
    dims0 = np.abs(x[6:9])
    r0 = _fit_residual(shape.kind, x, points, normals, dims0)
    cols = []
    for j in range(9):
        if j < 6:
            h = 1e-5 * max(1.0, abs(x[j]))
            xp = x.copy()
            xp[j] += h
            rp = _fit_residual(shape.kind, xp, points, normals, dims0)
            xm = x.copy()
            xm[j] -= h
            rm = _fit_residual(shape.kind, xm, points, normals, dims0)
            cols.append((rp - rm) / (2.0 * h))
        else:
            h = 0.1 * max(abs(x[j]), 1e-3)
            xp = x.copy()
            xp[j] += h
            rp = _fit_residual(shape.kind, xp, points, normals, dims0)
            cols.append((rp - r0) / h)
    # distance rows only: their parameter derivatives are Lipschitz
    # bounded, while normal-agreement rows jump at surface kinks and a
    # single edge point would then pin every direction it touches
    jac = np.stack(cols, axis=1)[:len(points)]
    scale_ref = max(float(dims0.max()), 1e-3)
    weights = _row_weights(points, corr * scale_ref)
    jac *= np.sqrt(weights)[:, None]
    prior_std = np.concatenate([
        np.full(3, PRIOR_CENTER_STD * scale_ref),
        np.full(3, PRIOR_ROT_STD),
        np.full(3, PRIOR_DIM_STD * scale_ref)])
    precision = (jac.T @ jac / (NOISE_REL * scale_ref) ** 2
                 + np.diag(prior_std ** -2.0))
    lower = np.linalg.cholesky(precision)
    gate = min(GATE_MAX, COV_N0 / max(coverage, 1))
    # coverage gates both terms: accumulated surface vouches for the
    # regions between patches even when no opposing contact pins them
    x = x + min(1.0, gate) * solve_triangular(lower.T, draw[:9], lower=False)
    wobble = np.concatenate([
        np.full(3, MODEL_ERR * scale_ref),
        np.full(3, MODEL_ERR),
        np.full(3, MODEL_ERR * MODEL_ERR_DIM * scale_ref)])
    x = x + gate * wobble * draw[9:]
    dims = np.maximum(np.abs(x[6:9]), 0.05 * max(float(dims0.max()), 1e-3))
    return _shape_from_params(shape.kind, np.concatenate([x[:6], dims]))


def _rows(points) -> set:
    return {row.tobytes() for row in np.ascontiguousarray(points)}


def _fallback_ball(points) -> PrimitiveShape:
    center = points.mean(axis=0)
    spread = float(np.linalg.norm(points - center, axis=1).mean())
    return PrimitiveShape.ball(max(spread, 1e-3), pose=Pose(np.eye(3), center))


def complete(inp: CompleterInput, n_out: int = 2048, seed: int = 0,
             generation: int = 0) -> BeliefState:
    """Predict a dense belief cloud from normalized contacts.

    Fits every class in a canonical data frame, drops fits whose body sits
    on the wrong side of the contact normals, resamples the winning
    surface, and denormalizes.  Generation 0 returns the plain best fit;
    generations >= 1 offset the parameters within the fit's posterior
    along a draw keyed to the occupied coverage cells, so successive
    completions keep disagreeing while exploration reaches surface the
    data has not yet covered, and settle exactly when it stops.  Output
    points are novel: none coincides exactly with an input point.
    """
    cloud = inp.cloud
    if len(cloud) < MIN_FIT_POINTS:
        raise TooFewPoints(f"completion needs >= {MIN_FIT_POINTS} contacts")
    q = _canonical_frame(cloud.points, cloud.normals)
    pts = cloud.points @ q
    nrm = cloud.normals @ q
    canon = PointCloud(pts, nrm)
    fits: List[FitResult] = []
    per_class: Dict[str, float] = {}
    for cls in FIT_CLASSES:
        try:
            fit = fit_primitive(cls, canon)
        except (DegenerateConfiguration, TooFewPoints, ValueError):
            per_class[cls] = float("inf")
            continue
        per_class[cls] = fit.residual
        fits.append(fit)
    centroid = pts.mean(axis=0)
    nbar = nrm.mean(axis=0)
    if np.linalg.norm(nbar) > SIDE_FILTER_MIN_NORMAL:
        # outward normals point away from the body: keep anti-normal fits
        fits = [f for f in fits
                if (f.shape.pose.translation - centroid) @ nbar < 0.0]
    fits = [f for f in fits if f.inlier_fraction >= 0.5]
    fallback = not fits
    if fallback:
        best = FitResult("sphere", _fallback_ball(pts), float("inf"), 0.0)
        fit_shape = best.shape
    else:
        best = select_model(fits)
        fit_shape = best.shape
        if generation > 0:
            sub_pts, sub_nrm = _subsample(pts, nrm, 0)
            raw = cloud.points * inp.norm.scale + inp.norm.mean
            coverage, draw = _evidence_draw(raw, COV_PITCH_MM)
            fit_shape = _posterior_shape(best.shape, sub_pts, sub_nrm,
                                         draw, corr=CORR_REL,
                                         coverage=coverage)
    world = PrimitiveShape(
        fit_shape.kind, fit_shape.dims * inp.norm.scale,
        Pose(q @ fit_shape.pose.rotation,
             (q @ fit_shape.pose.translation) * inp.norm.scale
             + inp.norm.mean))
    world = _stable_placement(world)
    base_input = denormalize_cloud(cloud, inp.norm).points
    taken = _rows(base_input)
    sample = None
    for attempt in range(4):
        draw = sample_surface(world, n_out,
                              seed=int(np.random.SeedSequence(
                                  [seed, attempt]).generate_state(1)[0]))
        if not (_rows(draw.points) & taken):
            sample = draw
            break
    if sample is None:
        raise ContractViolation("could not draw novel output points")
    diagnostics = {
        "class": best.shape_class,
        "residual": best.residual * inp.norm.scale,
        "inlier_fraction": best.inlier_fraction,
        "fallback": fallback,
        "per_class": {k: v * inp.norm.scale for k, v in per_class.items()},
        "dims": [float(v) for v in world.dims],
        "center": [float(v) for v in world.pose.translation],
    }
    return BeliefState(sample, diagnostics, generation)


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def external_complete(inp: CompleterInput, exchange_dir, n_out: int = 2048,
                      seed: int = 0, timeout: float = 60.0,
                      poll: float = 0.1,
                      generation: int = 0) -> BeliefState:
    """Route one completion request through a file exchange directory.

    Writes input.ply (normalized cloud with normals) and params.json
    atomically, then polls for output.ply.  The responder owns output.ply
    and must also write it atomically.  Output must hold exactly n_out
    points, none equal to an input point.
    """
    from .ply import read_ply, write_ply

    exchange = Path(exchange_dir)
    exchange.mkdir(parents=True, exist_ok=True)
    out_path = exchange / "output.ply"
    if out_path.exists():
        out_path.unlink()
    _atomic_write(exchange / "input.ply",
                  lambda p: write_ply(p, inp.cloud))
    params = {"n_out": int(n_out), "lambda": float(inp.norm.lam),
              "seed": int(seed)}
    _atomic_write(exchange / "params.json",
                  lambda p: p.write_text(json.dumps(params, sort_keys=True)))
    deadline = time.monotonic() + timeout
    result = None
    while time.monotonic() < deadline:
        if out_path.exists():
            try:
                result = read_ply(out_path)
                break
            except Exception:
                pass  # partially written by a non-atomic responder
        time.sleep(poll)
    if result is None:
        raise CompletionTimeout(
            f"no completer response within {timeout:g} s in {exchange}")
    if len(result) != n_out:
        raise ContractViolation(
            f"expected {n_out} points, got {len(result)}")
    if _rows(result.points) & _rows(inp.cloud.points):
        raise ContractViolation("output reuses input points verbatim")
    belief = denormalize_cloud(result, inp.norm)
    return BeliefState(belief, {"class": "external", "fallback": False},
                       generation)
