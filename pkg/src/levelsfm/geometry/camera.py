"""Pinhole camera model: intrinsics, world-to-camera poses, projection."""

from dataclasses import dataclass

import numpy as np

from ..errors import CheiralityViolation
from .rotations import project_to_rotation


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def normalize(self, px):
        """Pixel coordinates -> normalized image coordinates (z=1 plane)."""
        px = np.asarray(px, dtype=np.float64)
        return (px - np.array([self.cx, self.cy])) / np.array([self.fx, self.fy])

    def denormalize(self, xn):
        xn = np.asarray(xn, dtype=np.float64)
        return xn * np.array([self.fx, self.fy]) + np.array([self.cx, self.cy])

    def contains(self, px, margin=0.0):
        px = np.asarray(px, dtype=np.float64)
        return (
            (px[..., 0] >= -margin)
            & (px[..., 0] <= self.width - 1 + margin)
            & (px[..., 1] >= -margin)
            & (px[..., 1] <= self.height - 1 + margin)
        )


class CameraPose:
    """World-to-camera rigid transform: x_cam = R @ x_world + t."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64).copy()
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).reshape(3).copy()
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValueError("R is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValueError("R has negative determinant")

    def __repr__(self):
        return f"CameraPose(R={self.R.tolist()}, t={self.t.tolist()})"

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def cam_to_world(self, Xc):
        Xc = np.asarray(Xc, dtype=np.float64)
        return (Xc - self.t) @ self.R

    def inverse(self):
        return CameraPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """Returns self ∘ other (apply other first)."""
        return CameraPose(self.R @ other.R, self.R @ other.t + self.t)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @staticmethod
    def from_matrix(T):
        return CameraPose(T[:3, :3], T[:3, 3])

    def orthonormalized(self):
        return CameraPose(project_to_rotation(self.R), self.t)

    def copy(self):
        return CameraPose(self.R, self.t)


def project(X, intr, pose):
    """Project one world point to pixel coordinates.

    Raises CheiralityViolation when the point is not in front of the camera.
    """
    Xc = pose.R @ np.asarray(X, dtype=np.float64) + pose.t
    if Xc[2] <= 0:
        raise CheiralityViolation(f"depth {Xc[2]:.6g} <= 0")
    return np.array(
        [intr.fx * Xc[0] / Xc[2] + intr.cx, intr.fy * Xc[1] / Xc[2] + intr.cy]
    )


def project_many(X, intr, pose):
    """Vectorized projection of an (N,3) array.

    Returns (pixels (N,2), depths (N,)).  Points behind the camera get
    depth <= 0 and must be masked by the caller; no exception is raised.
    """
    X = np.asarray(X, dtype=np.float64)
    Xc = X @ pose.R.T + pose.t
    z = Xc[:, 2]
    safe = np.where(z != 0, z, 1.0)
    px = np.stack(
        [intr.fx * Xc[:, 0] / safe + intr.cx, intr.fy * Xc[:, 1] / safe + intr.cy],
        axis=1,
    )
    return px, z


def backproject(px, depth, intr, pose):
    """Pixel + depth -> world point (inverse of project at that depth)."""
    xn = intr.normalize(px)
    Xc = np.array([xn[0] * depth, xn[1] * depth, depth])
    return pose.R.T @ (Xc - pose.t)


def pixel_rays(px, intr, pose):
    """World-space rays through pixels.

    px: (N,2) pixel coordinates.  Returns (origins (N,3), unit dirs (N,3)).
    All rays share the camera center as origin.
    """
    px = np.atleast_2d(np.asarray(px, dtype=np.float64))
    xn = (px - np.array([intr.cx, intr.cy])) / np.array([intr.fx, intr.fy])
    d_cam = np.concatenate([xn, np.ones((len(xn), 1))], axis=1)
    d_world = d_cam @ pose.R
    d_world = d_world / np.linalg.norm(d_world, axis=1, keepdims=True)
    o = np.broadcast_to(pose.center, d_world.shape).copy()
    return o, d_world


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera pose for a camera at `center` whose +z axis points at
    `target` (OpenCV convention: x right, y down, z forward)."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - center
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera center coincides with target")
    fwd = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # view direction parallel to up: pick another up
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ center
    return CameraPose(R, t)
