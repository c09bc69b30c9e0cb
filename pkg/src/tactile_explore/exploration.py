"""Information-gain exploration: where to touch next, and the episode loop.

Each iteration executes one contact-mode interaction, accumulates the
measured cloud, completes it into a belief, and picks the next approach
pose by information gain minus motion cost over importance-sampled
candidate poses.  Episodes end on belief convergence, coverage saturation,
the interaction cap, or running out of reachable candidates.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .completion import MIN_FIT_POINTS, complete, completer_input
from .contact_modes import ContactMode, ModeParams, run_interaction
from .errors import (
    NoContact,
    NothingToExplore,
    SchemaMismatch,
)
from .geometry import (
    PointCloud,
    Pose,
    chamfer_distance,
    coverage_distances,
    estimate_normals,
    merge_clouds,
    rms_radius,
    voxel_volume,
)
from .gripper import (
    DEFAULT_TOL,
    GripperModel,
    GripperState,
    approach_until_contact,
    palm_facing_pose,
)
from .primitives import PrimitiveShape, sample_surface, signed_distance

LOG_SCHEMA_VERSION = 1
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0, 50.0, 50.0, 50.0)
STANDOFF_CLEARANCE = 10.0   # beyond finger reach (mm)
COLLISION_CLEARANCE = 1.0   # taxels must stay this clear at the standoff (mm)
PATH_MARGIN = 8.0           # approach sweep stops this short of the target (mm)
MOTION_STEPS = 20
NO_CONTACT_RETRIES = 5
INIT_RETRIES = 8
_PROBE_STRIDE = 47          # sparse taxel subset for path checks


@dataclass(frozen=True)
class ExplorationConfig:
    """Policy constants; every field has a paperless default and is logged."""

    coverage_threshold: float = 5.0
    k: int = 500
    sigma: float = 5.0
    weights: tuple = DEFAULT_WEIGHTS
    window: int = 3
    belief_threshold: float = 0.01
    max_interactions: int = 20
    mode: ContactMode = ContactMode.FINGER_GRAZING
    mode_params: ModeParams = field(default_factory=ModeParams)
    n_out: int = 2048
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be > 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_interactions < 1:
            raise ValueError("max interactions must be >= 1")
        if self.window < 2:
            raise ValueError("window counts consecutive beliefs, so >= 2")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (6,) or (w < 0.0).any():
            raise ValueError("weights must be 6 non-negative scalars")


@dataclass
class CandidatePose:
    target: np.ndarray
    normal: np.ndarray
    pose: Pose
    ig: float
    index: int
    cost: float = float("nan")
    score: float = float("nan")
    feasible: Optional[bool] = None


def information_gain(d_min, sigma: float):
    """Self-information of the Gaussian coverage kernel: d^2 / (2 sigma^2)."""
    if sigma <= 0.0:
        raise ValueError("sigma must be > 0")
    d = np.asarray(d_min, dtype=np.float64)
    if (d < 0.0).any():
        raise ValueError("coverage distance must be >= 0")
    out = d * d / (2.0 * sigma * sigma)
    return float(out) if out.ndim == 0 else out


def sample_candidates(belief: PointCloud, measured: PointCloud,
                      config: ExplorationConfig, seed, *,
                      model: Optional[GripperModel] = None
                      ) -> List[CandidatePose]:
    """Importance-sample k standoff poses over poorly covered belief points.

    Belief points whose nearest measured point is farther than the coverage
    threshold are drawn with replacement, weighted by information gain; each
    becomes a pose offset along the outward surface normal with the palm
    axis aimed back at the point and a uniform random yaw.  Raises
    NothingToExplore when coverage is saturated.
    """
    if len(belief) == 0 or len(measured) == 0:
        raise ValueError("belief and measured clouds must be non-empty")
    if model is None:
        model = GripperModel()
    standoff = model.reach_depth + STANDOFF_CLEARANCE
    d_min = coverage_distances(belief.points, measured.points)
    pool = np.nonzero(d_min > config.coverage_threshold)[0]
    if pool.size == 0:
        raise NothingToExplore(
            f"belief fully within {config.coverage_threshold:g} mm of "
            "measurements")
    normals = estimate_normals(belief).normals
    gains = information_gain(d_min[pool], config.sigma)
    rng = np.random.default_rng(seed)
    draws = rng.choice(pool, size=config.k, replace=True,
                       p=gains / gains.sum())
    yaws = rng.uniform(0.0, 2.0 * np.pi, config.k)
    out = []
    for i, (j, yaw) in enumerate(zip(draws, yaws)):
        target = belief.points[j]
        normal = normals[j]
        pose = palm_facing_pose(target + standoff * normal, -normal, yaw)
        out.append(CandidatePose(target.copy(), normal.copy(), pose,
                                 float(information_gain(d_min[j],
                                                        config.sigma)), i))
    return out


def filter_feasible(candidates: Sequence[CandidatePose],
                    shape: PrimitiveShape, workspace,
                    model: Optional[GripperModel] = None,
                    tol: float = DEFAULT_TOL) -> List[CandidatePose]:
    """Flag candidates whose standoff placement and approach path are clear.

    Stage 1 keeps poses inside the workspace box whose full taxel set stays
    collision-free; stage 2 marches a sparse taxel subset along the approach
    and rejects poses that would strike the object early.  Candidates are
    flagged in place, never dropped.
    """
    if model is None:
        model = GripperModel()
    candidates = list(candidates)
    if not candidates:
        return candidates
    lo = np.asarray(workspace[0], dtype=np.float64)
    hi = np.asarray(workspace[1], dtype=np.float64)
    local = model.taxels_local(np.zeros(len(model.fingers)))
    positions = np.stack([c.pose.translation for c in candidates])
    in_box = np.all((positions >= lo) & (positions <= hi), axis=1)
    placed = np.stack([c.pose.apply(local) for c in candidates])
    min_sdf = signed_distance(
        shape, placed.reshape(-1, 3)).reshape(len(candidates), -1).min(axis=1)
    clear = min_sdf >= COLLISION_CLEARANCE
    probes = local[::_PROBE_STRIDE]
    standoff = model.reach_depth + STANDOFF_CLEARANCE
    travels = np.arange(0.0, standoff - PATH_MARGIN, 2.0)
    surv = [i for i in range(len(candidates)) if in_box[i] and clear[i]]
    alive = set(surv)
    for i, cand in enumerate(candidates):
        if i not in alive:
            cand.feasible = False
    if surv:
        axes = np.stack([candidates[i].pose.rotation[:, 2] for i in surv])
        base = np.stack([candidates[i].pose.apply(probes) for i in surv])
        sweep = (base[:, None, :, :]
                 + travels[None, :, None, None] * axes[:, None, None, :])
        d = signed_distance(shape, sweep.reshape(-1, 3))
        ok = d.reshape(len(surv), -1).min(axis=1) > tol
        for k, i in enumerate(surv):
            candidates[i].feasible = bool(ok[k])
    return candidates


def _pose_coords(pose: Pose) -> np.ndarray:
    return np.concatenate([
        pose.translation,
        Rotation.from_matrix(pose.rotation).as_rotvec(),
    ])


def motion_cost(from_pose: Pose, to_pose: Pose,
                weights=DEFAULT_WEIGHTS, steps: int = MOTION_STEPS) -> float:
    """Weighted L1 path length of a linearly interpolated 6-coordinate move."""
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0.0).any():
        raise ValueError("weights must be >= 0")
    q0 = _pose_coords(from_pose)
    q1 = _pose_coords(to_pose)
    total = 0.0
    prev = q0
    for t in range(1, steps + 1):
        q = q0 + (q1 - q0) * (t / steps)
        total += float((w * np.abs(q - prev)).sum())
        prev = q
    return total


def score_candidates(candidates: Sequence[CandidatePose], current: Pose,
                     config: ExplorationConfig) -> List[CandidatePose]:
    """Score = gain - motion cost; descending, ties to cheaper then earlier."""
    for c in candidates:
        c.cost = motion_cost(current, c.pose, config.weights)
        c.score = c.ig - c.cost
    return sorted(candidates, key=lambda c: (-c.score, c.cost, c.index))


@dataclass
class EpisodeRecord:
    object_name: str
    mode: str
    seed: int
    config: dict
    shape: dict
    iterations: List[dict]
    summary: dict

    def to_lines(self) -> List[str]:
        header = {
            "type": "header",
            "schema_version": LOG_SCHEMA_VERSION,
            "object": self.object_name,
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "shape": self.shape,
        }
        rows = [header]
        rows.extend({"type": "iteration", **it} for it in self.iterations)
        rows.append({"type": "summary", **self.summary})
        return [json.dumps(r, sort_keys=True, separators=(",", ":"))
                for r in rows]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def read_episode_log(path) -> dict:
    """Parse one episode log; raises SchemaMismatch on missing/foreign schema."""
    lines = [json.loads(s) for s in Path(path).read_text().splitlines() if s]
    if not lines or lines[0].get("type") != "header":
        raise SchemaMismatch(f"{path}: missing header line")
    header = lines[0]
    if header.get("schema_version") != LOG_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"{path}: schema {header.get('schema_version')!r}, "
            f"expected {LOG_SCHEMA_VERSION}")
    iterations = [l for l in lines if l.get("type") == "iteration"]
    summaries = [l for l in lines if l.get("type") == "summary"]
    if not summaries:
        raise SchemaMismatch(f"{path}: missing summary line")
    return {"header": header, "iterations": iterations,
            "summary": summaries[-1]}


def _config_dict(config: ExplorationConfig) -> dict:
    out = dataclasses.asdict(config)
    out["mode"] = config.mode.value
    out["weights"] = [float(w) for w in config.weights]
    return out


def _shape_dict(shape: PrimitiveShape) -> dict:
    return {"kind": shape.kind, "dims": [float(d) for d in shape.dims]}


def _contact_checks(shape: PrimitiveShape, cloud: PointCloud) -> tuple:
    """Max |sdf| and min outward sdf derivative along contact normals.

    The forward difference evaluates the gradient on the outside of the
    surface, where the sdf is differentiable.  For these convex shapes it
    equals 1 exactly when the normal lies in the contact cone, so edge and
    rim contacts pass without a face-normal tie break.
    """
    if len(cloud) == 0:
        return 0.0, 1.0
    d = signed_distance(shape, cloud.points)
    eps = 1e-3
    ahead = signed_distance(shape, cloud.points + eps * cloud.normals)
    dots = (ahead - d) / eps
    return float(np.abs(d).max()), float(dots.min())


def _random_first_touch(model, shape, config, rng):
    center = shape.pose.translation
    reach = shape.bounding_radius() + model.reach_depth + STANDOFF_CLEARANCE
    for _ in range(INIT_RETRIES):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        pose = palm_facing_pose(center - reach * direction, direction,
                                rng.uniform(0.0, 2.0 * np.pi))
        state = GripperState(pose, np.zeros(len(model.fingers)))
        try:
            state, _ = approach_until_contact(
                model, state, direction, shape, tol=config.tol)
            return state
        except NoContact:
            continue
    return None


def run_episode(shape: PrimitiveShape, config: ExplorationConfig, seed: int,
                *, model: Optional[GripperModel] = None,
                completer: Optional[Callable] = None,
                object_name: str = "object",
                workspace=None,
                snapshot_dir=None) -> EpisodeRecord:
    """Run one exploration episode; returns a fully populated record.

    Deterministic given (shape, config, seed).  The completer seed is drawn
    once per episode so consecutive beliefs differ only by fit drift, which
    is what the convergence test measures.
    """
    if model is None:
        model = GripperModel()
    if completer is None:
        completer = complete
    rng = np.random.default_rng(seed)
    completer_seed = int(rng.integers(0, 2 ** 63 - 1))
    gt = sample_surface(shape, config.n_out,
                        seed=int(rng.integers(0, 2 ** 63 - 1)))
    gt_scale = rms_radius(gt.points)
    if workspace is None:
        half = shape.bounding_radius() + 2.0 * model.reach_depth + 60.0
        center = shape.pose.translation
        workspace = (center - half, center + half)
    snap = Path(snapshot_dir) if snapshot_dir is not None else None
    if snap is not None:
        snap.mkdir(parents=True, exist_ok=True)

    iterations: List[dict] = []
    meas: Optional[PointCloud] = None
    belief = None
    prev_belief = None
    pair_history: List[float] = []
    converged = False
    reason = "max_interactions"
    ts = 0

    state = _random_first_touch(model, shape, config, rng)
    if state is None:
        summary = {"interactions": 0, "converged": False,
                   "reason": "no_initial_contact", "final_chamfer_gt": None,
                   "final_volume": 0.0, "meas_points": 0}
        return EpisodeRecord(object_name, config.mode.value, seed,
                             _config_dict(config), _shape_dict(shape),
                             [], summary)

    for i in range(1, config.max_interactions + 1):
        result = run_interaction(model, state, shape, config.mode,
                                 config.mode_params, tol=config.tol,
                                 timestamp=ts)
        ts = result.next_timestamp
        new_points = len(result.cloud)
        if new_points:
            meas = (result.cloud if meas is None
                    else merge_clouds([meas, result.cloud]))
        max_sdf, min_dot = _contact_checks(shape, result.cloud)
        record = {
            "i": i,
            "events": len(result.events),
            "new_points": new_points,
            "meas_points": 0 if meas is None else len(meas),
            "volume": 0.0 if meas is None else voxel_volume(meas.points, 1.0),
            "contact_lost": bool(result.contact_lost),
            "contact_max_abs_sdf": max_sdf,
            "contact_min_normal_dot": min_dot,
            "belief_class": None,
            "fallback": None,
            "chamfer_gt": None,
            "chamfer_prev": None,
            "candidate": None,
        }
        belief = None
        if meas is not None and len(meas) >= MIN_FIT_POINTS:
            belief = completer(completer_input(meas), config.n_out,
                               completer_seed, generation=i)
            record["belief_class"] = belief.diagnostics.get("class")
            record["fallback"] = bool(belief.diagnostics.get("fallback"))
            record["chamfer_gt"] = chamfer_distance(
                belief.cloud.points, gt.points) / gt_scale
            if prev_belief is not None:
                pair = chamfer_distance(
                    belief.cloud.points, prev_belief.cloud.points)
                pair /= rms_radius(prev_belief.cloud.points)
                record["chamfer_prev"] = pair
                pair_history.append(pair)
            prev_belief = belief
        if snap is not None and belief is not None:
            from .ply import write_ply
            write_ply(snap / f"iter{i:02d}_meas.ply", meas)
            write_ply(snap / f"iter{i:02d}_belief.ply", belief.cloud)

        needed = config.window - 1
        if (len(pair_history) >= needed
                and all(p < config.belief_threshold
                        for p in pair_history[-needed:])):
            iterations.append(record)
            converged = True
            reason = "belief_converged"
            break

        if i == config.max_interactions:
            iterations.append(record)
            break

        if belief is None:
            # too few contacts to form a belief: bootstrap from a new side
            iterations.append(record)
            nxt = _random_first_touch(model, shape, config, rng)
            if nxt is None:
                reason = "no_initial_contact"
                break
            state = nxt
            continue

        try:
            cands = sample_candidates(
                belief.cloud, meas, config,
                int(rng.integers(0, 2 ** 63 - 1)), model=model)
        except NothingToExplore:
            iterations.append(record)
            converged = True
            reason = "coverage_saturated"
            break
        ranked = _rank_feasible(cands, result, shape, workspace, model, config)
        if not ranked:
            cands = sample_candidates(
                belief.cloud, meas, config,
                int(rng.integers(0, 2 ** 63 - 1)), model=model)
            ranked = _rank_feasible(cands, result, shape, workspace, model,
                                    config)
        if not ranked:
            # a wild belief can park every candidate out of reach; re-seat
            # blind rather than abandon the episode
            iterations.append(record)
            nxt = _random_first_touch(model, shape, config, rng)
            if nxt is None:
                reason = "no_feasible_candidate"
                break
            state = nxt
            continue
        moved = False
        for cand in ranked[:NO_CONTACT_RETRIES]:
            start = GripperState(cand.pose,
                                 np.zeros(len(model.fingers)))
            try:
                state, _ = approach_until_contact(
                    model, start, cand.pose.rotation[:, 2], shape,
                    tol=config.tol)
            except NoContact:
                continue
            moved = True
            record["candidate"] = {
                "target": [float(v) for v in cand.target],
                "ig": float(cand.ig),
                "cost": float(cand.cost),
                "score": float(cand.score),
            }
            break
        iterations.append(record)
        if not moved:
            # belief led everywhere but the object: re-seat blind
            nxt = _random_first_touch(model, shape, config, rng)
            if nxt is None:
                reason = "no_contact_at_candidates"
                break
            state = nxt

    final_cd = iterations[-1]["chamfer_gt"] if iterations else None
    summary = {
        "interactions": len(iterations),
        "converged": converged,
        "reason": reason,
        "final_chamfer_gt": final_cd,
        "final_volume": 0.0 if meas is None else voxel_volume(meas.points, 1.0),
        "meas_points": 0 if meas is None else len(meas),
    }
    return EpisodeRecord(object_name, config.mode.value, seed,
                         _config_dict(config), _shape_dict(shape),
                         iterations, summary)


def _rank_feasible(cands, result, shape, workspace, model, config):
    filter_feasible(cands, shape, workspace, model, tol=config.tol)
    ranked = score_candidates(cands, result.final_state.pose, config)
    return [c for c in ranked if c.feasible]
