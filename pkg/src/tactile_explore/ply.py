"""ASCII PLY serialization for point clouds.

Vertices carry x/y/z, optionally nx/ny/nz, and optionally an int timestamp.
Floats are written with 9 significant digits; values written at that
precision survive a read/write cycle byte-exactly.
"""

from __future__ import annotations

import os
from typing import Union

import numpy as np

from .geometry import PointCloud

_FLOAT_PROPS = ("x", "y", "z", "nx", "ny", "nz")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_ply(path: Union[str, os.PathLike], cloud: PointCloud) -> None:
    """Write a cloud as ASCII PLY.  Output is deterministic for equal inputs."""
    has_normals = cloud.normals is not None
    has_ts = cloud.timestamps is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_normals:
        lines += ["property double nx", "property double ny", "property double nz"]
    if has_ts:
        lines.append("property int timestamp")
    lines.append("end_header")
    for i in range(len(cloud)):
        row = [_fmt(v) for v in cloud.points[i]]
        if has_normals:
            row += [_fmt(v) for v in cloud.normals[i]]
        if has_ts:
            row.append(str(int(cloud.timestamps[i])))
        lines.append(" ".join(row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path: Union[str, os.PathLike]) -> PointCloud:
    """Read an ASCII PLY written by write_ply (or an equivalent layout)."""
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex = None
    props: list[str] = []
    body_start = None
    for i, raw in enumerate(lines[1:], start=1):
        line = raw.strip()
        if line.startswith("comment") or not line:
            continue
        if line == "format ascii 1.0":
            continue
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
            continue
        if line.startswith("element"):
            raise ValueError(f"{path}: unsupported element '{line}'")
        if line.startswith("property"):
            parts = line.split()
            props.append(parts[-1])
            continue
        if line == "end_header":
            body_start = i + 1
            break
        raise ValueError(f"{path}: unexpected header line '{line}'")
    if n_vertex is None or body_start is None:
        raise ValueError(f"{path}: truncated PLY header")
    for p in props:
        if p not in _FLOAT_PROPS and p != "timestamp":
            raise ValueError(f"{path}: unsupported property '{p}'")
    if props[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: vertex properties must start with x y z")
    rows = lines[body_start:body_start + n_vertex]
    if len(rows) < n_vertex:
        raise ValueError(f"{path}: expected {n_vertex} vertex rows, found {len(rows)}")
    if n_vertex == 0:
        data = np.zeros((0, len(props)))
    else:
        data = np.array([[float(v) for v in r.split()] for r in rows])
        if data.shape != (n_vertex, len(props)):
            raise ValueError(f"{path}: vertex rows do not match declared properties")
    cols = {name: data[:, j] for j, name in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if "nx" in cols:
        if not ("ny" in cols and "nz" in cols):
            raise ValueError(f"{path}: incomplete normal properties")
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    timestamps = cols["timestamp"].astype(np.int64) if "timestamp" in cols else None
    return PointCloud(points, normals, timestamps)
