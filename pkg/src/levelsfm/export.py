"""Byte-deterministic writers and readers for poses and point clouds."""

import numpy as np
import torch

from .errors import ParseError
from .geometry import CameraPose, quat_from_rotation, rotation_from_quat
from .pipeline.scene import ACTIVE


def _fmt(x):
    return f"{float(x):.17g}"


def write_poses(path, poses):
    """One `<id> qw qx qy qz tx ty tz` line per pose, ids ascending.

    The quaternion is Hamilton, scalar-first, and encodes the world-to-
    camera rotation; tx ty tz is the world-to-camera translation.
    """
    lines = []
    for image_id in sorted(poses):
        pose = poses[image_id]
        q = quat_from_rotation(pose.R)
        if q[0] < 0:
            q = -q
        vals = " ".join(_fmt(v) for v in (*q, *pose.t))
        lines.append(f"{image_id} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_poses(path):
    """Inverse of write_poses; returns {id: CameraPose}."""
    poses = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ParseError(
                    f"pose line needs 8 fields, got {len(parts)}",
                    line=ln, path=str(path),
                )
            try:
                image_id = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=ln, path=str(path)) from None
            q = np.array(vals[:4])
            q = q / np.linalg.norm(q)
            poses[image_id] = CameraPose(rotation_from_quat(q), vals[4:])
    return poses


_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {n}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property uchar status
end_header
"""


def point_colors(state):
    """Radiance color of each point, seen from its first observing camera.

    The view direction runs camera-to-point and the normal comes from the
    SDF gradient, matching how rendering feeds the radiance field.  Points
    without observations (or without fields) fall back to mid gray.
    """
    n = len(state.points)
    colors = np.full((n, 3), 0.5)
    if state.sdf is None or state.radiance is None or n == 0:
        return colors
    dtype = state.config.torch_dtype()
    rows, dirs = [], []
    for k in range(n):
        imgs = state.tracks.images_of(k)
        if not imgs:
            continue
        center = state.poses[imgs[0]].center
        d = state.points.xyz[k] - center
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        rows.append(k)
        dirs.append(d / norm)
    if not rows:
        return colors
    X = torch.as_tensor(state.points.xyz[rows], dtype=dtype)
    V = torch.as_tensor(np.asarray(dirs), dtype=dtype)
    g = state.sdf.gradient(X)
    with torch.no_grad():
        _, z = state.sdf.sdf_and_feature(X)
        normals = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        c = state.radiance(X, normals, V, z)
    colors[rows] = c.clamp(0.0, 1.0).double().numpy()
    return colors


def export_ply(path, state):
    """Binary little-endian PLY of all points with status flag and color."""
    n = len(state.points)
    colors = point_colors(state)
    rec = np.zeros(
        n,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1"),
               ("status", "u1")],
    )
    if n:
        xyz = state.points.xyz.astype("<f4")
        rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
        rgb = np.clip(colors * 255.0 + 0.5, 0, 255).astype("u1")
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        rec["status"] = state.points.status.astype("u1")
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(n=n).encode("ascii"))
        fh.write(rec.tobytes())
    return path


def read_ply_points(path):
    """Read back an export_ply file: (xyz float64, rgb uint8, status uint8)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file", path=str(path))
    header = data[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise ParseError("PLY header lacks a vertex element", path=str(path))
    body = data[end + len(b"end_header\n"):]
    rec = np.frombuffer(
        body,
        dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
               ("red", "u1"), ("green", "u1"), ("blue", "u1"),
               ("status", "u1")],
        count=n,
    )
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return xyz, rgb, rec["status"].copy()


def active_points(state):
    """(N,3) coordinates of points still marked active."""
    return state.points.xyz[state.points.status == ACTIVE]
