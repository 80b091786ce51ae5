"""Trajectory and point-cloud evaluation metrics."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DegenerateConfiguration, EmptySet, LengthMismatch


@dataclass
class SimilarityTransform:
    """p -> s * R @ p + t."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return self.s * (pts @ self.R.T) + self.t

    def inverse(self):
        s_inv = 1.0 / self.s
        return SimilarityTransform(s_inv, self.R.T, -s_inv * (self.R.T @ self.t))

    @staticmethod
    def identity():
        return SimilarityTransform()


def rotation_error(R_gt, R_est):
    """Geodesic angle between two rotations, in degrees.

    The arccos argument is clamped to [-1, 1] to absorb round-off.
    """
    R_gt = np.asarray(R_gt, dtype=np.float64)
    R_est = np.asarray(R_est, dtype=np.float64)
    c = (np.trace(R_gt @ R_est.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def umeyama_align(gt_pts, est_pts, with_scale=True):
    """Least-squares similarity mapping est onto gt.

    Minimizes sum ||gt - (s R est + t)||^2 over s > 0, R in SO(3), t.
    Returns a SimilarityTransform to be applied to the estimated points.
    """
    gt = np.asarray(gt_pts, dtype=np.float64)
    est = np.asarray(est_pts, dtype=np.float64)
    if gt.shape != est.shape:
        raise LengthMismatch(f"point sets differ in shape: {gt.shape} vs {est.shape}")
    n = len(gt)
    if n < 3:
        raise DegenerateConfiguration("similarity alignment needs >= 3 points")
    mu_g = gt.mean(axis=0)
    mu_e = est.mean(axis=0)
    gc = gt - mu_g
    ec = est - mu_e
    cov = gc.T @ ec / n
    U, D, Vt = np.linalg.svd(cov)
    # Collinear inputs leave the similarity underdetermined.
    if D[1] < 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfiguration("alignment points are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_e = (ec**2).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var_e)
    else:
        s = 1.0
    t = mu_g - s * R @ mu_e
    return SimilarityTransform(s, R, t)


def ate_rmse(gt_centers, est_centers, align):
    """Root-mean-square distance between aligned camera-center trajectories."""
    gt = np.asarray(gt_centers, dtype=np.float64)
    est = np.asarray(est_centers, dtype=np.float64)
    if len(gt) != len(est):
        raise LengthMismatch(f"{len(gt)} ground-truth vs {len(est)} estimated poses")
    d = gt - align.apply(est)
    return float(np.sqrt((d**2).sum(axis=1).mean()))


def pointcloud_acc_prec(points, reference, tau=0.035):
    """Accuracy (mean nearest-neighbor distance to the reference) and
    precision (fraction of points within tau of the reference)."""
    P = np.asarray(points, dtype=np.float64)
    Q = np.asarray(reference, dtype=np.float64)
    if len(P) == 0 or len(Q) == 0:
        raise EmptySet("accuracy/precision need non-empty point sets")
    d, _ = cKDTree(Q).query(P)
    return float(d.mean()), float((d <= tau).mean())


def chamfer_l1(A, B):
    """Symmetric mean nearest-neighbor distance, averaged over both directions."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if len(A) == 0 or len(B) == 0:
        raise EmptySet("Chamfer distance needs non-empty point sets")
    d_ab, _ = cKDTree(B).query(A)
    d_ba, _ = cKDTree(A).query(B)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))
