"""Contact interaction modes executed after first touch.

Each mode starts from a hand state already touching the object, drives the
hand through a mode-specific motion pattern, and records a contact snapshot
after every incremental motion.  Torque and force control are stood in for
by kinematic re-seating: after each increment the hand curls or translates
until the contact tolerance band is restored, which reproduces the contact
geometry without a dynamics engine.

Losing the object mid-sweep is data, not failure: modes return the events
accumulated so far with ``contact_lost`` set instead of raising.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ModeRequiresContact
from .geometry import PointCloud, Pose, merge_clouds
from .gripper import (
    BISECT_ITERS,
    DEFAULT_CURL_STEP,
    DEFAULT_TOL,
    ContactEvent,
    GripperModel,
    GripperState,
    _rot_about,
    close_fingers_until_contact,
    detect_contacts,
    taxel_positions,
)
from .primitives import PrimitiveShape, signed_distance

RESTORE_CAP = 25.0   # max restore translation per increment (mm)
RESTORE_STEP = 2.0   # coarse restore sweep step (mm)


class ContactMode(enum.Enum):
    """Interaction pattern applied once the hand is on the object."""

    GRASP_RELEASING = "grasp_releasing"
    FINGER_GRAZING = "finger_grazing"
    PALM_ROLLING = "palm_rolling"


@dataclass(frozen=True)
class ModeParams:
    """Motion amplitudes and step counts shared by the three modes.

    Defaults give traces dense relative to the taxel pitch: grazing drags
    30 mm in 15 steps, rolling sweeps +-30 deg and pitches 30 deg in 12
    increments per phase.
    """

    retract: float = 30.0
    retract_steps: int = 15
    roll_deg: float = 30.0
    pitch_deg: float = 30.0
    roll_steps: int = 12


@dataclass
class InteractionResult:
    mode: ContactMode
    events: List[ContactEvent]
    cloud: PointCloud
    steps: int
    final_state: GripperState
    next_timestamp: int
    contact_lost: bool = False


def _merged(events: List[ContactEvent]) -> PointCloud:
    if not events:
        return PointCloud(np.zeros((0, 3)))
    return merge_clouds([e.cloud for e in events])


def _require_contact(model: GripperModel, state: GripperState,
                     shape: PrimitiveShape, tol: float) -> None:
    event = detect_contacts(model, state, shape, tol)
    if len(event) == 0:
        raise ModeRequiresContact(
            "interaction modes start from a touching hand; "
            "run approach_until_contact first")


def _restore_contact(model: GripperModel, state: GripperState,
                     shape: PrimitiveShape, tol: float,
                     cap: float = RESTORE_CAP) -> Optional[GripperState]:
    """Translate along the palm normal until 0 <= min sdf <= tol.

    Returns None when no translation within +-cap restores the band, which
    callers treat as the object slipping out of reach.
    """
    normal = state.palm_normal
    pos0 = taxel_positions(model, state).points

    def batch_min(travels):
        sweep = pos0[None, :, :] + travels[:, None, None] * normal
        d = signed_distance(shape, sweep.reshape(-1, 3))
        return d.reshape(len(travels), -1).min(axis=1)

    f0 = float(batch_min(np.array([0.0]))[0])
    if 0.0 <= f0 <= tol:
        return state
    steps = np.arange(1, int(np.ceil(cap / RESTORE_STEP)) + 1) * RESTORE_STEP
    if f0 < 0.0:
        # penetrating: back away until clear of the band, then bisect down
        travels = -steps
        vals = batch_min(travels)
        above = np.nonzero(vals > tol)[0]
        if above.size == 0:
            return None
        k = int(above[0])
        lo = float(travels[k])
        hi = float(travels[k - 1]) if k > 0 else 0.0
    else:
        travels = steps
        vals = batch_min(travels)
        below = np.nonzero(vals <= tol)[0]
        if below.size == 0:
            return None
        k = int(below[0])
        hi = float(travels[k])
        lo = float(travels[k - 1]) if k > 0 else 0.0
    # keep f(lo) > tol >= f(hi); the final hi lands inside [0, tol]
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        if float(batch_min(np.array([mid]))[0]) <= tol:
            hi = mid
        else:
            lo = mid
    moved = Pose(state.pose.rotation, state.pose.translation + hi * normal)
    return GripperState(moved, state.curls.copy())


def run_grasp_releasing(model: GripperModel, state: GripperState,
                        shape: PrimitiveShape, *, tol: float = DEFAULT_TOL,
                        increment: float = DEFAULT_CURL_STEP,
                        timestamp: int = 0) -> InteractionResult:
    """Close all fingers onto the object, snapshot contacts, reopen.

    Produces one discrete contact snapshot spanning whichever taxel regions
    reached the surface.
    """
    _require_contact(model, state, shape, tol)
    closed, event = close_fingers_until_contact(
        model, state, shape, tol=tol, increment=increment, timestamp=timestamp)
    released = GripperState(closed.pose, np.zeros_like(closed.curls))
    return InteractionResult(
        mode=ContactMode.GRASP_RELEASING,
        events=[event],
        cloud=_merged([event]),
        steps=1,
        final_state=released,
        next_timestamp=timestamp + 1)


def run_finger_grazing(model: GripperModel, state: GripperState,
                       shape: PrimitiveShape, retract: float = 30.0,
                       steps: int = 15, *, tol: float = DEFAULT_TOL,
                       increment: float = DEFAULT_CURL_STEP,
                       timestamp: int = 0) -> InteractionResult:
    """Drag curled fingers along the surface while the hand backs away.

    Each step translates the hand retract/steps opposite the palm normal,
    then re-seats every finger from its current curl, so fingertips slide
    and leave traces.  An empty snapshot means the object left the grasp
    envelope; the sweep stops and returns what it has.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _require_contact(model, state, shape, tol)
    step_vec = -state.palm_normal * (retract / float(steps))
    events: List[ContactEvent] = []
    cur = state
    executed = 0
    lost = False
    for _ in range(steps):
        moved = Pose(cur.pose.rotation, cur.pose.translation + step_vec)
        cur = GripperState(moved, cur.curls.copy())
        executed += 1
        cur, event = close_fingers_until_contact(
            model, cur, shape, tol=tol, increment=increment,
            timestamp=timestamp + len(events))
        if len(event) == 0:
            lost = True
            break
        events.append(event)
    final = GripperState(cur.pose, np.zeros_like(cur.curls))
    return InteractionResult(
        mode=ContactMode.FINGER_GRAZING,
        events=events,
        cloud=_merged(events),
        steps=executed,
        final_state=final,
        next_timestamp=timestamp + len(events),
        contact_lost=lost)


def _roll_schedule(roll_deg: float, pitch_deg: float, steps: int):
    """Per-increment (local axis, delta) pairs: roll 0 -> +A -> -A -> 0 about
    the palm normal, then pitch 0 -> P about the palm's lateral axis, each
    phase in `steps` increments."""
    z = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    out = []
    if roll_deg != 0.0:
        n_out = max(1, round(steps / 4))
        n_swing = max(1, steps - 2 * n_out)
        legs = [(roll_deg, n_out), (-2.0 * roll_deg, n_swing), (roll_deg, n_out)]
        for span, n in legs:
            out.extend((z, span / n) for _ in range(n))
    if pitch_deg != 0.0:
        out.extend((x, pitch_deg / steps) for _ in range(steps))
    return out


def run_palm_rolling(model: GripperModel, state: GripperState,
                     shape: PrimitiveShape, roll_deg: float = 30.0,
                     pitch_deg: float = 30.0, steps: int = 12, *,
                     tol: float = DEFAULT_TOL,
                     timestamp: int = 0) -> InteractionResult:
    """Roll the open palm against the object, recording the contact band.

    Phase 1 twists about the palm normal through 0 -> +roll -> -roll -> 0;
    phase 2 pitches 0 -> pitch_deg about the palm's lateral axis.  Fingers
    stay open throughout.  After every increment the hand translates along
    the palm normal to restore 0 <= min sdf <= tol; needing more than
    RESTORE_CAP of translation sets ``contact_lost`` and ends the sweep.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _require_contact(model, state, shape, tol)
    cur = GripperState(state.pose, np.zeros_like(state.curls))
    restored = _restore_contact(model, cur, shape, tol)
    events: List[ContactEvent] = []
    executed = 0
    lost = restored is None
    if not lost:
        cur = restored
        events.append(detect_contacts(model, cur, shape, tol, timestamp))
        for axis_local, delta in _roll_schedule(roll_deg, pitch_deg, steps):
            rot = _rot_about(axis_local, np.deg2rad(delta))
            # pivot at the contact centroid, as force control would hold it;
            # the restore translation then re-seats the band
            last = events[-1].cloud
            pivot = (last.points.mean(axis=0) if len(last) > 0
                     else cur.pose.translation)
            world_rot = cur.pose.rotation @ rot @ cur.pose.rotation.T
            pose = Pose(
                cur.pose.rotation @ rot,
                pivot + world_rot @ (cur.pose.translation - pivot))
            executed += 1
            restored = _restore_contact(
                model, GripperState(pose, cur.curls.copy()), shape, tol)
            if restored is None:
                lost = True
                break
            cur = restored
            events.append(detect_contacts(
                model, cur, shape, tol, timestamp + len(events)))
    return InteractionResult(
        mode=ContactMode.PALM_ROLLING,
        events=events,
        cloud=_merged(events),
        steps=executed,
        final_state=cur,
        next_timestamp=timestamp + len(events),
        contact_lost=lost)


def run_interaction(model: GripperModel, state: GripperState,
                    shape: PrimitiveShape, mode: ContactMode,
                    params: Optional[ModeParams] = None, *,
                    tol: float = DEFAULT_TOL,
                    increment: float = DEFAULT_CURL_STEP,
                    timestamp: int = 0) -> InteractionResult:
    """Dispatch one interaction of the given mode from a touching state."""
    if params is None:
        params = ModeParams()
    if mode is ContactMode.GRASP_RELEASING:
        return run_grasp_releasing(model, state, shape, tol=tol,
                                   increment=increment, timestamp=timestamp)
    if mode is ContactMode.FINGER_GRAZING:
        return run_finger_grazing(model, state, shape, params.retract,
                                  params.retract_steps, tol=tol,
                                  increment=increment, timestamp=timestamp)
    if mode is ContactMode.PALM_ROLLING:
        return run_palm_rolling(model, state, shape, params.roll_deg,
                                params.pitch_deg, params.roll_steps,
                                tol=tol, timestamp=timestamp)
    raise ValueError(f"unknown mode: {mode!r}")
