"""Kinematic gripper with taxel arrays and contact detection against primitives.

The hand frame has the palm centered at the origin, the palm normal along +z
(toward the object), and the four fingers extending along +y with the thumb
crossing from -x.  Each finger has two rigid links driven by a single curl
angle (1:1 coupling between the two joints).  Taxels are points on the hand
surface; the palm sheet is slightly concave (paraboloid) so flat faces touch
its rim first, which is what a cupped palm does.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NoContact, PenetrationTooDeep
from .geometry import PointCloud, Pose, as_unit
from .primitives import PrimitiveShape, closest_surface_point, signed_distance

HAND_SCHEMA_VERSION = 1

REGIONS = ("palm", "pad", "nail", "tip")

DEFAULT_TOL = 0.5          # contact band (mm)
DEFAULT_CURL_STEP = 0.05   # coarse curl increment (rad)
BISECT_ITERS = 10


def _rot_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array([
        [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
        [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
        [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
    ])


def _grid_offsets(rows: int, cols: int, pitch: float):
    r = (np.arange(rows) - (rows - 1) / 2.0) * pitch
    c = (np.arange(cols) - (cols - 1) / 2.0) * pitch
    return r, c


@dataclass
class FingerSpec:
    name: str
    base: np.ndarray       # knuckle position in the hand frame
    direction: np.ndarray  # pointing direction at zero curl, in the palm plane

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)

    @property
    def curl_axis(self) -> np.ndarray:
        return np.cross(self.direction, np.array([0.0, 0.0, 1.0]))


def _default_fingers() -> list:
    xs = [-22.5, -7.5, 7.5, 22.5]
    names = ["index", "middle", "ring", "little"]
    fingers = [FingerSpec(n, [x, 50.0, 0.0], [0.0, 1.0, 0.0])
               for n, x in zip(names, xs)]
    # thumb root sits below the palm bowl so it cannot shadow palm contact
    fingers.append(FingerSpec("thumb", [-30.0, -15.0, -15.0], [1.0, 0.0, 0.0]))
    return fingers


@dataclass
class GripperModel:
    """Hand geometry: palm sheet, five two-link fingers, taxel layouts."""

    palm_grid: tuple = (8, 14)
    palm_pitch: float = 6.0
    palm_size: tuple = (60.0, 100.0)
    palm_curvature_radius: float = 80.0
    link_lengths: tuple = (35.0, 30.0)
    pad_grid: tuple = (10, 8)
    pad_pitch: float = 4.0
    nail_grid: tuple = (12, 8)
    nail_pitch: float = 3.0
    tip_grid: tuple = (3, 3)
    tip_pitch: float = 4.0
    theta_max: float = float(np.pi / 2.0)
    # anatomical rim slope: a flat face meets one rim corner, not four
    palm_tilt: tuple = (0.02, 0.015)
    fingers: list = field(default_factory=_default_fingers)

    def __post_init__(self):
        rows, cols = _grid_offsets(*self.palm_grid, self.palm_pitch)
        gx, gy = np.meshgrid(rows, cols, indexing="ij")
        rho2 = gx ** 2 + gy ** 2
        # concave sheet: rim taxels near z=0, center recessed
        gz = (rho2 - rho2.max()) / (2.0 * self.palm_curvature_radius)
        gz = gz + self.palm_tilt[0] * gx + self.palm_tilt[1] * gy
        self._palm_local = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

        def seg_grid(grid, pitch, length):
            along, across = _grid_offsets(*grid, pitch)
            al, ac = np.meshgrid(along + length / 2.0, across, indexing="ij")
            return al.ravel(), ac.ravel()

        l1, l2 = self.link_lengths
        self._pad_al, self._pad_ac = seg_grid(self.pad_grid, self.pad_pitch, l1)
        self._nail_al, self._nail_ac = seg_grid(self.nail_grid, self.nail_pitch, l2)
        tu, tv = _grid_offsets(*self.tip_grid, self.tip_pitch)
        tug, tvg = np.meshgrid(tu, tv, indexing="ij")
        self._tip_u, self._tip_v = tug.ravel(), tvg.ravel()

        regions = ["palm"] * self._palm_local.shape[0]
        finger_idx = [-1] * self._palm_local.shape[0]
        per_finger = (["pad"] * self._pad_al.size + ["nail"] * self._nail_al.size
                      + ["tip"] * self._tip_u.size)
        for f in range(len(self.fingers)):
            regions += per_finger
            finger_idx += [f] * len(per_finger)
        self.taxel_region = np.array(regions)
        self.taxel_finger = np.array(finger_idx, dtype=np.int64)

    @property
    def n_taxels(self) -> int:
        return self.taxel_region.shape[0]

    @property
    def reach_depth(self) -> float:
        """Max reach of the finger chain beyond the palm plane."""
        return float(sum(self.link_lengths))

    def finger_taxels_local(self, finger: int, thetas: np.ndarray) -> np.ndarray:
        """Hand-frame taxel positions of one finger for a batch of curl angles.

        thetas is (K,); returns (K, n, 3) with n = pad + nail + tip taxels.
        """
        spec = self.fingers[finger]
        a = spec.curl_axis
        d0 = spec.direction
        ez = np.array([0.0, 0.0, 1.0])
        th = np.asarray(thetas, dtype=np.float64).reshape(-1)

        def rot(v, ang):
            c = np.cos(ang)[:, None]
            s = np.sin(ang)[:, None]
            return v * c + np.cross(a, v) * s + a * (a @ v) * (1.0 - c)

        d1, d2 = rot(d0, th), rot(d0, 2.0 * th)
        p2 = rot(ez, 2.0 * th)
        bevel = (d2 + p2) / np.sqrt(2.0)       # 45-degree distal end cap
        l1, l2 = self.link_lengths
        base = spec.base
        joint = base + l1 * d1                                    # (K, 3)
        pad = (base + self._pad_al[None, :, None] * d1[:, None, :]
               + self._pad_ac[None, :, None] * a)
        nail = (joint[:, None, :] + self._nail_al[None, :, None] * d2[:, None, :]
                + self._nail_ac[None, :, None] * a)
        tip_base = joint + l2 * d2
        tip = (tip_base[:, None, :] + self._tip_u[None, :, None] * a
               + self._tip_v[None, :, None] * bevel[:, None, :])
        return np.concatenate([pad, nail, tip], axis=1)

    def taxels_local(self, curls: np.ndarray) -> np.ndarray:
        """All taxel positions in the hand frame for the given curls."""
        parts = [self._palm_local]
        for f in range(len(self.fingers)):
            parts.append(self.finger_taxels_local(f, [curls[f]])[0])
        return np.concatenate(parts)


@dataclass
class GripperState:
    pose: Pose
    curls: np.ndarray

    def __post_init__(self):
        self.curls = np.asarray(self.curls, dtype=np.float64).reshape(-1)

    def copy(self) -> "GripperState":
        return GripperState(Pose(self.pose.rotation.copy(),
                                 self.pose.translation.copy()),
                            self.curls.copy())

    @property
    def palm_normal(self) -> np.ndarray:
        return self.pose.rotation[:, 2]


@dataclass
class ContactEvent:
    cloud: PointCloud
    taxel_ids: np.ndarray
    state: GripperState
    timestamp: int

    def __len__(self) -> int:
        return len(self.cloud)


def palm_facing_pose(position: np.ndarray, palm_axis: np.ndarray,
                     yaw: float = 0.0) -> Pose:
    """Hand pose at position with the palm normal along palm_axis.

    yaw spins the hand about the palm axis; the zero-yaw reference twist is
    arbitrary but fixed, so equal inputs give equal poses.
    """
    z = as_unit(palm_axis)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(z @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    x = as_unit(np.cross(ref, z))
    y = np.cross(z, x)
    c, s = np.cos(yaw), np.sin(yaw)
    rotation = np.stack([x * c + y * s, -x * s + y * c, z], axis=1)
    return Pose(rotation, np.asarray(position, dtype=np.float64))


def taxel_positions(model: GripperModel, state: GripperState) -> PointCloud:
    """Base-frame positions of every taxel, in stable taxel-id order."""
    return PointCloud(state.pose.apply(model.taxels_local(state.curls)))


def detect_contacts(model: GripperModel, state: GripperState,
                    shape: PrimitiveShape, tol: float = DEFAULT_TOL,
                    timestamp: int = 0) -> ContactEvent:
    """Taxels within tol of the surface, snapped onto it along the SDF gradient.

    Raises PenetrationTooDeep when any taxel sits below -2*tol, which signals
    a step-size bug in the calling motion code.
    """
    pos = state.pose.apply(model.taxels_local(state.curls))
    d = signed_distance(shape, pos)
    deepest = float(d.min())
    if deepest < -2.0 * tol:
        raise PenetrationTooDeep(
            f"taxel at sdf {deepest:.3f} mm exceeds -2*tol={-2 * tol:.3f} mm")
    ids = np.nonzero(d <= tol)[0]
    proj, _, normals = closest_surface_point(shape, pos[ids]) if ids.size else (
        np.zeros((0, 3)), None, np.zeros((0, 3)))
    cloud = PointCloud(proj, normals if ids.size else None,
                       np.full(ids.size, timestamp, dtype=np.int64))
    return ContactEvent(cloud, ids, state.copy(), timestamp)


def _min_sdf(model: GripperModel, state: GripperState,
             shape: PrimitiveShape) -> float:
    pos = state.pose.apply(model.taxels_local(state.curls))
    return float(signed_distance(shape, pos).min())


def _translated(state: GripperState, offset: np.ndarray) -> GripperState:
    return GripperState(Pose(state.pose.rotation,
                             state.pose.translation + offset), state.curls)


def approach_until_contact(model: GripperModel, state: GripperState,
                           direction: np.ndarray, shape: PrimitiveShape,
                           step: float = 2.0, max_travel: float = 400.0,
                           tol: float = DEFAULT_TOL, timestamp: int = 0):
    """Translate the hand along direction until a taxel enters the contact band.

    The crossing is refined by bisection so the closest taxel lands in
    [0, tol].  Returns (state, event).  Raises NoContact when max_travel is
    exhausted without contact.
    """
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    local = model.taxels_local(state.curls)
    pos0 = state.pose.apply(local)
    travels = np.arange(0.0, max_travel + step, step)
    sweep = pos0[None, :, :] + travels[:, None, None] * direction
    d = signed_distance(shape, sweep.reshape(-1, 3)).reshape(len(travels), -1)
    mins = d.min(axis=1)
    hits = np.nonzero(mins <= tol)[0]
    if hits.size == 0:
        raise NoContact(f"no contact within {max_travel:.0f} mm of travel")
    k = int(hits[0])
    if k == 0:
        if mins[0] < 0.0:
            raise PenetrationTooDeep("approach started inside the object")
        final = state.copy()
    else:
        t_lo, t_hi = travels[k - 1], travels[k]
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (t_lo + t_hi)
            dm = float(signed_distance(shape, pos0 + mid * direction).min())
            if dm <= tol:
                t_hi = mid
            else:
                t_lo = mid
        final = _translated(state, t_hi * direction)
    event = detect_contacts(model, final, shape, tol, timestamp)
    return final, event


def _seat_finger(model: GripperModel, state: GripperState, finger: int,
                 shape: PrimitiveShape, tol: float,
                 increment: float) -> float:
    """Curl (or uncurl) one finger until its closest taxel rests in [0, tol].

    Returns the new curl angle.  A finger that reaches theta_max without
    touching stays at theta_max; a finger that cannot escape penetration by
    uncurling stops at zero curl.
    """
    pose = state.pose
    theta = float(state.curls[finger])

    def min_sdf_batch(thetas):
        loc = model.finger_taxels_local(finger, thetas)
        pos = pose.apply(loc.reshape(-1, 3))
        return signed_distance(shape, pos).reshape(len(thetas), -1).min(axis=1)

    f_now = float(min_sdf_batch([theta])[0])
    if 0.0 <= f_now <= tol:
        return theta
    if f_now < 0.0:
        # retracting re-seat: open until the taxels clear the surface
        grid = np.arange(theta, -increment, -increment)
        grid[-1] = max(grid[-1], 0.0)
        vals = min_sdf_batch(grid)
        ok = np.nonzero(vals >= 0.0)[0]
        if ok.size == 0:
            return 0.0
        k = int(ok[0])
        if k == 0:
            return theta
        th_in, th_out = grid[k - 1], grid[k]
        for _ in range(BISECT_ITERS):
            mid = 0.5 * (th_in + th_out)
            if float(min_sdf_batch([mid])[0]) >= 0.0:
                th_out = mid
            else:
                th_in = mid
        return float(th_out)
    grid = np.arange(theta, model.theta_max + increment, increment)
    grid[-1] = min(grid[-1], model.theta_max)
    vals = min_sdf_batch(grid)
    hits = np.nonzero(vals <= tol)[0]
    if hits.size == 0:
        return float(model.theta_max)
    k = int(hits[0])
    if k == 0:
        return theta
    th_lo, th_hi = grid[k - 1], grid[k]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (th_lo + th_hi)
        if float(min_sdf_batch([mid])[0]) <= tol:
            th_hi = mid
        else:
            th_lo = mid
    return float(th_hi)


def close_fingers_until_contact(model: GripperModel, state: GripperState,
                                shape: PrimitiveShape, tol: float = DEFAULT_TOL,
                                increment: float = DEFAULT_CURL_STEP,
                                timestamp: int = 0):
    """Seat every finger on the surface independently, then snapshot contacts.

    Fingers whose taxels are clear of the surface curl inward in fixed
    increments (bisection-refined); fingers left penetrating by a prior hand
    motion open up instead.  Returns (state, event).
    """
    out = state.copy()
    for f in range(len(model.fingers)):
        out.curls[f] = _seat_finger(model, out, f, shape, tol, increment)
    event = detect_contacts(model, out, shape, tol, timestamp)
    return out, event


# ---------------------------------------------------------------------------
# hand description file


def save_hand(path, model: GripperModel) -> None:
    doc = {
        "version": HAND_SCHEMA_VERSION,
        "palm": {
            "grid": list(model.palm_grid),
            "pitch_mm": model.palm_pitch,
            "size_mm": list(model.palm_size),
            "curvature_radius_mm": model.palm_curvature_radius,
        },
        "links_mm": list(model.link_lengths),
        "arrays": {
            "pad": {"grid": list(model.pad_grid), "pitch_mm": model.pad_pitch},
            "nail": {"grid": list(model.nail_grid), "pitch_mm": model.nail_pitch},
            "tip": {"grid": list(model.tip_grid), "pitch_mm": model.tip_pitch},
        },
        "theta_max_rad": model.theta_max,
        "fingers": [{"name": f.name, "base_mm": [float(v) for v in f.base],
                     "direction": [float(v) for v in f.direction]}
                    for f in model.fingers],
    }
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_hand(path) -> GripperModel:
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("version") != HAND_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported hand version {doc.get('version')}")
    palm = doc["palm"]
    arrays = doc["arrays"]
    fingers = [FingerSpec(f["name"], f["base_mm"], f["direction"])
               for f in doc["fingers"]]
    return GripperModel(
        palm_grid=tuple(palm["grid"]), palm_pitch=palm["pitch_mm"],
        palm_size=tuple(palm["size_mm"]),
        palm_curvature_radius=palm["curvature_radius_mm"],
        link_lengths=tuple(doc["links_mm"]),
        pad_grid=tuple(arrays["pad"]["grid"]), pad_pitch=arrays["pad"]["pitch_mm"],
        nail_grid=tuple(arrays["nail"]["grid"]),
        nail_pitch=arrays["nail"]["pitch_mm"],
        tip_grid=tuple(arrays["tip"]["grid"]), tip_pitch=arrays["tip"]["pitch_mm"],
        theta_max=doc["theta_max_rad"], fingers=fingers)
