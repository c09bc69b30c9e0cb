"""Analytic primitive shapes: signed distance, normals, sampling, meshing.

Shapes are balls (general ellipsoids), boxes, and elliptic cylinders, each
with a rigid pose mapping the object frame into the base frame.  Signed
distances are exact: curved cases solve the closest-point problem with a
safeguarded Newton iteration instead of using a scaled-space approximation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import ellipe

from .geometry import PointCloud, Pose

KINDS = ("ball", "box", "cylinder")

# Default max chord deviation (mm) between a curved surface and its mesh.
DEFAULT_MESH_DEVIATION = 0.4

_AXIS_EPS = 1e-12   # relative clamp for on-axis queries of the ellipse solver
_ON_SURFACE = 1e-9  # |sdf| below this uses the analytic face/implicit normal


@dataclass
class PrimitiveShape:
    """One primitive with size parameters (mm) and a pose (object -> base).

    dims meaning per kind:
        ball:     (rx, ry, rz) semi-axes
        box:      (w, h, l) full edge lengths along x, y, z
        cylinder: (rx, ry, h) cross-section semi-axes and full height along z
    """

    kind: str
    dims: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind '{self.kind}'")
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if not np.all(self.dims > 0):
            raise ValueError("shape dimensions must be positive")

    @classmethod
    def ball(cls, rx: float, ry: float = None, rz: float = None,
             pose: Pose = None) -> "PrimitiveShape":
        ry = rx if ry is None else ry
        rz = rx if rz is None else rz
        return cls("ball", [rx, ry, rz], pose or Pose.identity())

    @classmethod
    def box(cls, w: float, h: float, l: float, pose: Pose = None) -> "PrimitiveShape":
        return cls("box", [w, h, l], pose or Pose.identity())

    @classmethod
    def cylinder(cls, rx: float, ry: float, h: float,
                 pose: Pose = None) -> "PrimitiveShape":
        return cls("cylinder", [rx, ry, h], pose or Pose.identity())

    def bounding_radius(self) -> float:
        """Radius of a ball around the object-frame origin containing the shape."""
        if self.kind == "ball":
            return float(self.dims.max())
        if self.kind == "box":
            return float(np.linalg.norm(self.dims / 2.0))
        rx, ry, h = self.dims
        return float(np.hypot(max(rx, ry), h / 2.0))


# ---------------------------------------------------------------------------
# closest-point solvers


def _axes_closest(axes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Closest point on an origin-centered axis-aligned ellipse/ellipsoid.

    axes is (d,), q is (N, d) with strictly positive components.  Solves
    sum_i (axes_i * q_i / (axes_i^2 + t))^2 = 1 for the unique root
    t > -min(axes^2) with a bisection-safeguarded Newton iteration, then
    returns x_i = axes_i^2 * q_i / (axes_i^2 + t).
    """
    a = np.asarray(axes, dtype=np.float64)
    a2 = a * a
    aq2 = (a * q) ** 2                                    # (N, d)
    n = q.shape[0]
    t = np.empty(n)
    lo = np.full(n, -a2.min() * (1.0 - 1e-12))
    hi = np.linalg.norm(a * q, axis=1) + a2.max() * 1e-12
    t[:] = 0.5 * (lo + hi)
    idx = np.arange(n)
    aq2_a = aq2
    lo_a, hi_a, t_a = lo, hi, t.copy()
    for _ in range(60):
        denom = a2 + t_a[:, None]
        terms = aq2_a / (denom * denom)
        g = terms.sum(axis=1) - 1.0
        conv = np.abs(g) < 1e-12
        if conv.any():
            t[idx[conv]] = t_a[conv]
            keep = ~conv
            idx = idx[keep]
            if idx.size == 0:
                break
            aq2_a = aq2_a[keep]
            lo_a, hi_a, t_a = lo_a[keep], hi_a[keep], t_a[keep]
            denom, terms, g = denom[keep], terms[keep], g[keep]
        gp = -2.0 * (terms / denom).sum(axis=1)
        pos = g > 0.0
        lo_a = np.where(pos, t_a, lo_a)
        hi_a = np.where(pos, hi_a, t_a)
        t_new = t_a - g / gp
        bad = ~((t_new > lo_a) & (t_new < hi_a)) | ~np.isfinite(t_new)
        t_a = np.where(bad, 0.5 * (lo_a + hi_a), t_new)
    if idx.size:
        t[idx] = t_a
    return a2 * q / (a2 + t[:, None])


def _ellipse_closest(a: float, b: float, q: np.ndarray):
    """2D signed distance and closest point on an ellipse with semi-axes (a, b).

    q is (N, 2).  Returns (dist, proj) where dist < 0 inside.
    """
    q = np.asarray(q, dtype=np.float64)
    if a == b:
        rho = np.linalg.norm(q, axis=1)
        safe = np.where(rho > 0, rho, 1.0)
        dirs = np.where((rho > 0)[:, None], q / safe[:, None],
                        np.array([1.0, 0.0]))
        proj = dirs * a
        return rho - a, proj
    eps = _AXIS_EPS * max(a, b)
    sign = np.where(q < 0.0, -1.0, 1.0)
    folded = np.maximum(np.abs(q), eps)
    proj_f = _axes_closest(np.array([a, b]), folded)
    inside = (q[:, 0] / a) ** 2 + (q[:, 1] / b) ** 2 < 1.0
    dist = np.linalg.norm(folded - proj_f, axis=1)
    dist = np.where(inside, -dist, dist)
    return dist, proj_f * sign


def _ellipsoid_closest(radii: np.ndarray, q: np.ndarray):
    """Signed distance and closest surface point for an axis-aligned ellipsoid."""
    rx, ry, rz = radii
    q = np.asarray(q, dtype=np.float64)
    if rx == ry == rz:
        rho = np.linalg.norm(q, axis=1)
        safe = np.where(rho > 0, rho, 1.0)
        dirs = np.where((rho > 0)[:, None], q / safe[:, None],
                        np.array([1.0, 0.0, 0.0]))
        return rho - rx, dirs * rx
    if rx == ry:
        # spheroid: reduce to an ellipse in the (radial, z) half-plane
        rho = np.linalg.norm(q[:, :2], axis=1)
        safe = np.where(rho > 0, rho, 1.0)
        dirs = np.where((rho > 0)[:, None], q[:, :2] / safe[:, None],
                        np.array([1.0, 0.0]))
        dist, proj2 = _ellipse_closest(rx, rz, np.stack([rho, q[:, 2]], axis=1))
        proj = np.concatenate([dirs * proj2[:, :1], proj2[:, 1:2]], axis=1)
        return dist, proj
    eps = _AXIS_EPS * radii.max()
    sign = np.where(q < 0.0, -1.0, 1.0)
    folded = np.maximum(np.abs(q), eps)
    proj_f = _axes_closest(radii, folded)
    inside = ((q / radii) ** 2).sum(axis=1) < 1.0
    dist = np.linalg.norm(folded - proj_f, axis=1)
    dist = np.where(inside, -dist, dist)
    return dist, proj_f * sign


def _box_closest(dims: np.ndarray, q: np.ndarray):
    half = dims / 2.0
    clamped = np.clip(q, -half, half)
    outside = np.linalg.norm(q - clamped, axis=1)
    gap = half - np.abs(q)                     # per-axis distance to the face
    min_gap = gap.min(axis=1)
    inside_mask = outside == 0.0
    proj = clamped.copy()
    if np.any(inside_mask):
        axis = np.argmin(gap[inside_mask], axis=1)
        rows = np.nonzero(inside_mask)[0]
        snapped = proj[rows]
        sgn = np.where(q[rows, axis] >= 0.0, 1.0, -1.0)
        snapped[np.arange(rows.size), axis] = sgn * half[axis]
        proj[rows] = snapped
    dist = np.where(inside_mask, -min_gap, outside)
    return dist, proj


def _box_face_normal(dims: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Face normal chosen by the largest |coordinate|/half-extent ratio.

    Exact ties (edges/corners) resolve to the lowest axis index.
    """
    half = dims / 2.0
    ratio = np.abs(q) / half
    axis = np.argmax(ratio, axis=1)
    n = np.zeros_like(q)
    rows = np.arange(q.shape[0])
    n[rows, axis] = np.where(q[rows, axis] >= 0.0, 1.0, -1.0)
    return n


def _cylinder_closest(dims: np.ndarray, q: np.ndarray):
    rx, ry, h = dims
    hz = h / 2.0
    d2, proj2 = _ellipse_closest(rx, ry, q[:, :2])
    dz = np.abs(q[:, 2]) - hz
    z_snap = np.where(q[:, 2] >= 0.0, hz, -hz)

    lateral = np.concatenate([proj2, q[:, 2:3]], axis=1)
    cap = np.concatenate([q[:, :2], z_snap[:, None]], axis=1)
    rim = np.concatenate([proj2, z_snap[:, None]], axis=1)

    both_out = (d2 > 0.0) & (dz > 0.0)
    # otherwise snap to whichever boundary is closer; ties go to the wall
    use_lateral = ~both_out & (d2 >= dz)
    proj = np.where(both_out[:, None], rim,
                    np.where(use_lateral[:, None], lateral, cap))
    dist = np.where(both_out, np.hypot(d2, dz), np.maximum(d2, dz))
    return dist, proj


def _object_frame(shape: PrimitiveShape, points: np.ndarray) -> np.ndarray:
    inv = shape.pose.inverse()
    return inv.apply(points)


def _implicit_normal(shape: PrimitiveShape, proj_obj: np.ndarray) -> np.ndarray:
    """Outward normal at on-surface object-frame points."""
    if shape.kind == "ball":
        n = proj_obj / (shape.dims ** 2)
    elif shape.kind == "box":
        n = _box_face_normal(shape.dims, proj_obj)
    else:
        rx, ry, h = shape.dims
        d2, _ = _ellipse_closest(rx, ry, proj_obj[:, :2])
        cap_gap = np.abs(np.abs(proj_obj[:, 2]) - h / 2.0)
        lat = np.zeros_like(proj_obj)
        lat[:, 0] = proj_obj[:, 0] / rx ** 2
        lat[:, 1] = proj_obj[:, 1] / ry ** 2
        lat_len = np.linalg.norm(lat, axis=1)
        capn = np.zeros_like(proj_obj)
        capn[:, 2] = np.where(proj_obj[:, 2] >= 0.0, 1.0, -1.0)
        # rim ties keep the lateral normal; axis points must use the cap
        use_cap = (cap_gap < np.abs(d2)) | (lat_len == 0.0)
        n = np.where(use_cap[:, None], capn, lat)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    lens[lens == 0.0] = 1.0
    return n / lens


def closest_surface_point(shape: PrimitiveShape, points: np.ndarray):
    """Closest surface point, signed distance, and outward normal, base frame.

    Accepts (3,) or (N, 3); returns (proj, dist, normal) with matching shape.
    The normal is the exact SDF gradient at the query point; for queries on
    the surface it falls back to the analytic surface normal at the point.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    q = _object_frame(shape, pts)
    if shape.kind == "ball":
        dist, proj = _ellipsoid_closest(shape.dims, q)
    elif shape.kind == "box":
        dist, proj = _box_closest(shape.dims, q)
    else:
        dist, proj = _cylinder_closest(shape.dims, q)
    delta = q - proj
    with np.errstate(invalid="ignore", divide="ignore"):
        grad = delta / dist[:, None]
    on_surface = np.abs(dist) <= _ON_SURFACE
    if np.any(on_surface):
        grad[on_surface] = _implicit_normal(shape, proj[on_surface])
    grad = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    proj_base = shape.pose.apply(proj)
    normal_base = shape.pose.apply_vectors(grad)
    if single:
        return proj_base[0], float(dist[0]), normal_base[0]
    return proj_base, dist, normal_base


def signed_distance(shape: PrimitiveShape,
                    points: np.ndarray) -> Union[float, np.ndarray]:
    """Exact signed distance (mm), negative inside.  (3,) in -> scalar out."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    q = _object_frame(shape, pts)
    if shape.kind == "ball":
        dist, _ = _ellipsoid_closest(shape.dims, q)
    elif shape.kind == "box":
        dist, _ = _box_closest(shape.dims, q)
    else:
        dist, _ = _cylinder_closest(shape.dims, q)
    return float(dist[0]) if single else dist


def surface_normal(shape: PrimitiveShape, points: np.ndarray) -> np.ndarray:
    """Outward unit normal for points near the surface (|sdf| < 1 mm)."""
    return closest_surface_point(shape, points)[2]


# ---------------------------------------------------------------------------
# surface sampling


def _accept_pool(rng: np.random.Generator, n: int, draw_batch,
                 batch: int = 2048):
    """Collect n accepted rows from fixed-size rejection batches.

    draw_batch(rng, m) must consume a fixed amount of randomness per call and
    return (candidates, accept_probability).
    """
    taken = []
    got = 0
    while got < n:
        cand, p = draw_batch(rng, batch)
        u = rng.random(batch)
        acc = cand[u < p]
        taken.append(acc)
        got += acc.shape[0]
    return np.concatenate(taken)[:n]


def _sample_ellipsoid(radii: np.ndarray, n: int, rng: np.random.Generator):
    rx, ry, rz = radii
    if rx == ry == rz:
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = v * rx
    else:
        w = np.array([ry * rz, rx * rz, rx * ry])
        wmax = w.max()

        def draw(rng_, m):
            v = rng_.standard_normal((m, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            dens = np.linalg.norm(v * w, axis=1) / wmax
            return v, dens

        dirs = _accept_pool(rng, n, draw)
        pts = dirs * radii
    normals = pts / radii ** 2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals


def _sample_box(dims: np.ndarray, n: int, rng: np.random.Generator):
    w, h, l = dims
    half = dims / 2.0
    # faces: +x, -x, +y, -y, +z, -z; each point draws its own face so the
    # cloud moves continuously when dims change: only points whose
    # assignment variate straddles a boundary switch faces
    areas = np.array([h * l, h * l, w * l, w * l, w * h, w * h])
    cum = np.cumsum(areas / areas.sum())
    face = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), 5)
    uv = 2.0 * rng.random((n, 2)) - 1.0
    axis = face // 2
    sgn = np.where(face % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    rows = np.arange(n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    pts[rows, axis] = sgn * half[axis]
    pts[rows, others[:, 0]] = uv[:, 0] * half[others[:, 0]]
    pts[rows, others[:, 1]] = uv[:, 1] * half[others[:, 1]]
    normals[rows, axis] = sgn
    return pts, normals


def _ellipse_perimeter(a: float, b: float) -> float:
    big, small = max(a, b), min(a, b)
    return float(4.0 * big * ellipe(1.0 - (small / big) ** 2))


def _arc_theta(rx: float, ry: float, u: np.ndarray) -> np.ndarray:
    """Arc-length-uniform ellipse angles by inverse interpolation."""
    grid = np.linspace(0.0, 2.0 * np.pi, 2049)
    speed = np.hypot(rx * np.sin(grid), ry * np.cos(grid))
    cum = np.concatenate([[0.0], np.cumsum(
        0.5 * (speed[1:] + speed[:-1]) * np.diff(grid))])
    return np.interp(u * cum[-1], cum, grid)


def _sample_cylinder(dims: np.ndarray, n: int, rng: np.random.Generator,
                     seed_seq: np.random.SeedSequence):
    rx, ry, h = dims
    lateral_area = _ellipse_perimeter(rx, ry) * h
    cap_area = np.pi * rx * ry
    w = np.array([lateral_area, cap_area, cap_area])
    # per-point part assignment and per-point coordinate draws from fixed
    # streams keep the cloud continuous in dims (see _sample_box)
    s_assign, s_lat, s_cap = [np.random.default_rng(s)
                              for s in seed_seq.spawn(3)]
    part = np.minimum(np.searchsorted(np.cumsum(w / w.sum()),
                                      s_assign.random(n), side="right"), 2)
    lat_u = s_lat.random((n, 2))
    cap_u = s_cap.random((n, 2))
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    lat = part == 0
    if lat.any():
        theta = _arc_theta(rx, ry, lat_u[lat, 0])
        pts[lat, 0] = rx * np.cos(theta)
        pts[lat, 1] = ry * np.sin(theta)
        pts[lat, 2] = (lat_u[lat, 1] - 0.5) * h
        nrm = np.stack([np.cos(theta) / rx, np.sin(theta) / ry,
                        np.zeros(theta.size)], axis=1)
        normals[lat] = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    for cap, sgn in ((1, 1.0), (2, -1.0)):
        sel = part == cap
        if not sel.any():
            continue
        r = np.sqrt(cap_u[sel, 0])
        th = 2.0 * np.pi * cap_u[sel, 1]
        pts[sel, 0] = rx * r * np.cos(th)
        pts[sel, 1] = ry * r * np.sin(th)
        pts[sel, 2] = sgn * 0.5 * h
        normals[sel, 2] = sgn
    return pts, normals


def sample_surface(shape: PrimitiveShape, n: int, seed: int) -> PointCloud:
    """Draw n area-uniform surface points with outward normals (base frame).

    Deterministic for a given (shape, n, seed).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    ss = np.random.SeedSequence(seed)
    child, cyl_child = ss.spawn(2)
    rng = np.random.default_rng(child)
    if shape.kind == "ball":
        pts, normals = _sample_ellipsoid(shape.dims, n, rng)
    elif shape.kind == "box":
        pts, normals = _sample_box(shape.dims, n, rng)
    else:
        pts, normals = _sample_cylinder(shape.dims, n, rng, cyl_child)
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(shape.pose.apply(pts),
                      shape.pose.apply_vectors(normals))


# ---------------------------------------------------------------------------
# meshing


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)


def mesh_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume via the divergence theorem (needs outward winding)."""
    v = mesh.vertices[mesh.faces]
    return float(np.abs(np.einsum("fi,fi->f", v[:, 0],
                                  np.cross(v[:, 1], v[:, 2])).sum()) / 6.0)


def mesh_is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def _mesh_box(dims: np.ndarray) -> TriangleMesh:
    half = dims / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                        for sz in (-1, 1)], dtype=np.float64) * half
    # index bits: x*4 + y*2 + z, with 1 = positive side
    quads = [
        (4, 6, 7, 5),   # +x
        (0, 1, 3, 2),   # -x
        (2, 3, 7, 6),   # +y
        (0, 4, 5, 1),   # -y
        (1, 5, 7, 3),   # +z
        (0, 2, 6, 4),   # -z
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return TriangleMesh(corners, np.array(faces))


def _curve_segments(radius: float, deviation: float, arc: float,
                    minimum: int) -> int:
    if radius <= deviation:
        return minimum
    step = 2.0 * np.arccos(max(-1.0, 1.0 - deviation / radius))
    return max(minimum, int(np.ceil(arc / step)))


def _mesh_ellipsoid(radii: np.ndarray, deviation: float) -> TriangleMesh:
    rmax = float(radii.max())
    n_lon = _curve_segments(rmax, deviation, 2.0 * np.pi, 12)
    n_lat = _curve_segments(rmax, deviation, np.pi, 6)
    lats = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    lons = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    grid = np.array([[np.sin(la) * np.cos(lo), np.sin(la) * np.sin(lo),
                      np.cos(la)] for la in lats for lo in lons])
    verts = np.concatenate([[[0.0, 0.0, 1.0]], grid, [[0.0, 0.0, -1.0]]]) * radii
    top, bottom = 0, len(verts) - 1
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)
    faces = []
    for j in range(n_lon):
        faces.append((top, idx(0, j), idx(0, j + 1)))
        faces.append((bottom, idx(len(lats) - 1, j + 1), idx(len(lats) - 1, j)))
    for i in range(len(lats) - 1):
        for j in range(n_lon):
            a, b = idx(i, j), idx(i, j + 1)
            c, d = idx(i + 1, j), idx(i + 1, j + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    return TriangleMesh(verts, np.array(faces))


def _mesh_cylinder(dims: np.ndarray, deviation: float) -> TriangleMesh:
    rx, ry, h = dims
    n_seg = _curve_segments(max(rx, ry), deviation, 2.0 * np.pi, 12)
    theta = np.linspace(0.0, 2.0 * np.pi, n_seg, endpoint=False)
    ring = np.stack([rx * np.cos(theta), ry * np.sin(theta)], axis=1)
    hz = h / 2.0
    verts = [np.concatenate([ring, np.full((n_seg, 1), hz)], axis=1),
             np.concatenate([ring, np.full((n_seg, 1), -hz)], axis=1),
             np.array([[0.0, 0.0, hz], [0.0, 0.0, -hz]])]
    verts = np.concatenate(verts)
    c_top, c_bot = 2 * n_seg, 2 * n_seg + 1
    faces = []
    for j in range(n_seg):
        jn = (j + 1) % n_seg
        t0, t1 = j, jn
        b0, b1 = n_seg + j, n_seg + jn
        faces.append((t0, b0, t1))
        faces.append((t1, b0, b1))
        faces.append((c_top, t0, t1))
        faces.append((c_bot, b1, b0))
    return TriangleMesh(verts, np.array(faces))


def to_mesh(shape: PrimitiveShape,
            deviation: float = DEFAULT_MESH_DEVIATION) -> TriangleMesh:
    """Watertight outward-wound triangle mesh; chord deviation <= deviation mm."""
    if deviation <= 0:
        raise ValueError("deviation must be positive")
    if shape.kind == "ball":
        mesh = _mesh_ellipsoid(shape.dims, deviation)
    elif shape.kind == "box":
        mesh = _mesh_box(shape.dims)
    else:
        mesh = _mesh_cylinder(shape.dims, deviation)
    return TriangleMesh(shape.pose.apply(mesh.vertices), mesh.faces)


def write_stl(path, mesh: TriangleMesh) -> None:
    """Binary STL export."""
    tri = mesh.vertices[mesh.faces].astype(np.float32)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    nrm = np.cross(e1, e2)
    lens = np.linalg.norm(nrm, axis=1, keepdims=True)
    lens[lens == 0.0] = 1.0
    nrm = (nrm / lens).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(b"tactile-explore primitive mesh".ljust(80, b"\0"))
        fh.write(struct.pack("<I", tri.shape[0]))
        for i in range(tri.shape[0]):
            fh.write(nrm[i].tobytes())
            fh.write(tri[i].tobytes())
            fh.write(struct.pack("<H", 0))


def write_mesh_ply(path, mesh: TriangleMesh) -> None:
    """ASCII PLY export with vertex and face elements."""
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {mesh.vertices.shape[0]}",
        "property double x", "property double y", "property double z",
        f"element face {mesh.faces.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(f"{v:.9g}" for v in row) for row in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in row) for row in mesh.faces]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# object suite

SUITE_SCHEMA_VERSION = 1


@dataclass
class SuiteEntry:
    name: str
    category: str
    variation: str
    shape: PrimitiveShape


def _yaw_pose(yaw_deg: float, translation) -> Pose:
    a = np.deg2rad(yaw_deg)
    rot = np.array([[np.cos(a), -np.sin(a), 0.0],
                    [np.sin(a), np.cos(a), 0.0],
                    [0.0, 0.0, 1.0]])
    return Pose(rot, translation)


def default_suite() -> list:
    """The nine benchmark objects: three categories x small/big/deformed+rotated."""
    spec = [
        ("ball_small", "ball", "small", "ball", [30, 30, 30], 0.0),
        ("ball_big", "ball", "big", "ball", [45, 45, 45], 0.0),
        ("ball_dr", "ball", "dr", "ball", [30, 30, 45], 45.0),
        ("box_small", "box", "small", "box", [60, 60, 60], 0.0),
        ("box_big", "box", "big", "box", [90, 90, 90], 0.0),
        ("box_dr", "box", "dr", "box", [60, 60, 90], 45.0),
        ("cylinder_small", "cylinder", "small", "cylinder", [25, 25, 80], 0.0),
        ("cylinder_big", "cylinder", "big", "cylinder", [37.5, 37.5, 120], 0.0),
        ("cylinder_dr", "cylinder", "dr", "cylinder", [25, 37.5, 80], 45.0),
    ]
    out = []
    for name, cat, var, kind, dims, yaw in spec:
        shape = PrimitiveShape(kind, dims, _yaw_pose(yaw, [0.0, 0.0, 0.0]))
        out.append(SuiteEntry(name, cat, var, shape))
    return out


def save_object_suite(path, entries: Sequence[SuiteEntry]) -> None:
    objs = []
    for e in entries:
        yaw = np.rad2deg(np.arctan2(e.shape.pose.rotation[1, 0],
                                    e.shape.pose.rotation[0, 0]))
        objs.append({
            "name": e.name,
            "category": e.category,
            "variation": e.variation,
            "kind": e.shape.kind,
            "dims_mm": [float(d) if d != int(d) else int(d) for d in e.shape.dims],
            "yaw_deg": float(yaw) if yaw != int(yaw) else int(yaw),
            "translation_mm": [float(t) for t in e.shape.pose.translation],
        })
    doc = {"version": SUITE_SCHEMA_VERSION, "objects": objs}
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_object_suite(path) -> list:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("version") != SUITE_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported suite version {doc.get('version')}")
    out = []
    for obj in doc["objects"]:
        kind = obj["kind"]
        if kind not in KINDS:
            raise ValueError(f"{path}: unknown kind '{kind}'")
        dims = obj["dims_mm"]
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"{path}: bad dims for '{obj['name']}'")
        pose = _yaw_pose(float(obj.get("yaw_deg", 0.0)),
                         obj.get("translation_mm", [0.0, 0.0, 0.0]))
        out.append(SuiteEntry(obj["name"], obj["category"], obj["variation"],
                              PrimitiveShape(kind, dims, pose)))
    return out
