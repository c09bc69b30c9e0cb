"""Synthetic training-sample generation and augmentation.

A sample pairs the tactile contacts from one simulated grasp (input) with a
dense ground-truth surface sample (target).  Truncation variants are
materialized on disk; noise and rotation are train-time transforms recorded
in the manifest instead of baked into files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GenerationFailed, MissingTimestamps, NoContact
from .geometry import (
    NormalizationParams,
    PointCloud,
    Pose,
    merge_clouds,
    normalize_cloud,
)
from .gripper import (
    GripperModel,
    GripperState,
    approach_until_contact,
    close_fingers_until_contact,
    palm_facing_pose,
)
from .primitives import PrimitiveShape, sample_surface

MANIFEST_SCHEMA_VERSION = 1
DEFAULT_N_TARGET = 2048
DEFAULT_RETRIES = 8
STANDOFF_MARGIN = 20.0  # clearance beyond bounding radius + finger reach (mm)
SCALE_RANGE = (0.7, 1.3)


@dataclass(frozen=True)
class AugmentationSpec:
    """Truncation levels plus train-time noise/rotation declaration."""

    truncation_fractions: tuple = tuple(round(0.1 * i, 1) for i in range(10))
    noise_sigma: float = 1.0
    rotate: bool = True

    def __post_init__(self):
        fr = np.asarray(self.truncation_fractions, dtype=np.float64)
        if fr.size and (fr.min() < 0.0 or fr.max() >= 1.0):
            raise ValueError("truncation fractions must lie in [0, 1)")
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be >= 0")


@dataclass
class DatasetSample:
    input: PointCloud
    target: PointCloud
    shape: PrimitiveShape
    shape_id: str
    norm: NormalizationParams


def generate_sample(shape: PrimitiveShape, seed, *,
                    model: Optional[GripperModel] = None,
                    n_target: int = DEFAULT_N_TARGET,
                    shape_id: str = "",
                    approach_direction=None,
                    start_position=None,
                    retries: int = DEFAULT_RETRIES) -> DatasetSample:
    """One simulated grasp: init facing the object, approach, close, extract.

    The hand starts at a preset distance along a random direction with the
    palm toward the object; initializations that never reach contact are
    re-drawn up to `retries` times before GenerationFailed.  Passing
    approach_direction pins the direction (retries then re-draw only yaw);
    start_position overrides the derived standoff placement.
    """
    if model is None:
        model = GripperModel()
    rng = np.random.default_rng(seed)
    center = shape.pose.translation
    standoff = shape.bounding_radius() + model.reach_depth + STANDOFF_MARGIN
    last_err: Optional[NoContact] = None
    for _ in range(retries):
        if approach_direction is None:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
        else:
            direction = np.asarray(approach_direction, dtype=np.float64)
            direction = direction / np.linalg.norm(direction)
        start = (center - standoff * direction if start_position is None
                 else np.asarray(start_position, dtype=np.float64))
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        pose = palm_facing_pose(start, direction, yaw)
        state = GripperState(pose, np.zeros(len(model.fingers)))
        try:
            state, touch = approach_until_contact(
                model, state, direction, shape, timestamp=0)
        except NoContact as err:
            last_err = err
            continue
        state, grasp = close_fingers_until_contact(
            model, state, shape, timestamp=1)
        cloud = merge_clouds([touch.cloud, grasp.cloud])
        _, norm = normalize_cloud(cloud)
        target = sample_surface(shape, n_target,
                                int(rng.integers(0, 2 ** 63 - 1)))
        return DatasetSample(cloud, target, shape, shape_id, norm)
    raise GenerationFailed(
        f"no contact after {retries} initializations: {last_err}")


def truncate_points(cloud: PointCloud, fraction: float) -> PointCloud:
    """Drop the chronologically latest floor(fraction*M) points.

    Ordering is by timestamp with ties broken by index, so the earliest
    points always survive.
    """
    if cloud.timestamps is None:
        raise MissingTimestamps("truncation is by contact time")
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    m = len(cloud)
    keep = m - int(np.floor(fraction * m))
    order = np.argsort(cloud.timestamps, kind="stable")
    idx = np.sort(order[:keep])
    return cloud.take(idx)


def add_noise(cloud: PointCloud, sigma: float, seed) -> PointCloud:
    """Perturb positions with i.i.d. per-coordinate Gaussian noise.

    Normals and timestamps pass through untouched; sigma 0 is exact
    identity.
    """
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    out = cloud.copy()
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    out.points = out.points + rng.normal(0.0, sigma, out.points.shape)
    return out


def random_rotation(sample: DatasetSample, seed) -> DatasetSample:
    """Apply one uniform random rotation jointly to input, target, and shape."""
    rot = Rotation.random(random_state=np.random.default_rng(seed))
    mat = rot.as_matrix()

    def spin(cloud: PointCloud) -> PointCloud:
        out = cloud.copy()
        out.points = out.points @ mat.T
        if out.normals is not None:
            out.normals = out.normals @ mat.T
        return out

    pose = Pose(mat @ sample.shape.pose.rotation,
                mat @ sample.shape.pose.translation)
    return replace(sample,
                   input=spin(sample.input),
                   target=spin(sample.target),
                   shape=replace(sample.shape, pose=pose))


def _sample_seed(master_seed: int, mesh_id: str, grasp: int) -> int:
    key = f"{master_seed}:{mesh_id}:{grasp}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def _scaled_variant(shape: PrimitiveShape, rng) -> tuple:
    scales = rng.uniform(*SCALE_RANGE, size=3)
    return replace(shape, dims=shape.dims * scales), scales


def build_dataset(suite: Sequence, per_shape: int, spec: AugmentationSpec,
                  seed: int, out_dir, *, variants: int = 1,
                  model: Optional[GripperModel] = None,
                  n_target: int = DEFAULT_N_TARGET) -> dict:
    """Write paired PLY samples plus a manifest; returns the manifest dict.

    Meshes are per-axis rescaled copies of the suite shapes (`variants` per
    entry).  Every (mesh, grasp) pair is materialized once per truncation
    fraction, so the manifest count is
    per_shape * len(truncation_fractions) * (len(suite) * variants).
    Reruns with the same seed write byte-identical files.
    """
    from .ply import write_ply

    if model is None:
        model = GripperModel()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meshes = []
    for entry in suite:
        scale_rng = np.random.default_rng(
            _sample_seed(seed, f"scales:{entry.name}", 0))
        for v in range(variants):
            shape, scales = _scaled_variant(entry.shape, scale_rng)
            meshes.append({
                "id": f"{entry.name}_v{v:02d}",
                "kind": shape.kind,
                "dims": [float(d) for d in shape.dims],
                "scales": [float(s) for s in scales],
            })
            meshes[-1]["_shape"] = shape
    samples = []
    for mesh in meshes:
        shape = mesh.pop("_shape")
        for g in range(per_shape):
            gseed = _sample_seed(seed, mesh["id"], g)
            sample = generate_sample(shape, gseed, model=model,
                                     n_target=n_target, shape_id=mesh["id"])
            for frac in spec.truncation_fractions:
                sid = f"{mesh['id']}_g{g:02d}_t{int(round(frac * 100)):02d}"
                trunc = truncate_points(sample.input, frac)
                write_ply(out / f"{sid}_input.ply", trunc)
                write_ply(out / f"{sid}_target.ply", sample.target)
                samples.append({
                    "id": sid,
                    "mesh": mesh["id"],
                    "grasp_seed": gseed,
                    "truncation": float(frac),
                    "input_points": len(trunc),
                    "files": [f"{sid}_input.ply", f"{sid}_target.ply"],
                })
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": int(seed),
        "lambda": 1.0,
        "per_shape": int(per_shape),
        "variants": int(variants),
        "n_target": int(n_target),
        "noise_sigma": float(spec.noise_sigma),
        "rotate": bool(spec.rotate),
        "truncation_fractions": [float(f) for f in spec.truncation_fractions],
        "count": len(samples),
        "meshes": meshes,
        "samples": samples,
    }
    with open(out / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
