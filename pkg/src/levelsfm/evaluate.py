"""Gauge-aligned evaluation against ground truth, and the metrics report.

Reconstructions live in an arbitrary similarity gauge; every metric here
first aligns estimated camera centers to ground truth with a similarity
transform, then measures rotation error, trajectory error, and point or
mesh quality in the ground-truth frame.
"""

import json

import numpy as np

from .errors import LengthMismatch
from .geometry import (
    ate_rmse,
    chamfer_l1,
    pointcloud_acc_prec,
    rotation_error,
    umeyama_align,
)

SCHEMA_VERSION = 1


def align_poses(gt_poses, est_poses):
    """Similarity transform taking estimated centers onto ground truth.

    Returns (ids, transform) over the ids present in both sets; at least
    three common poses are required to fix a similarity.
    """
    ids = sorted(set(gt_poses) & set(est_poses))
    if len(ids) < 3:
        raise LengthMismatch(
            f"pose alignment needs >= 3 shared ids, got {len(ids)}"
        )
    gt_c = np.stack([gt_poses[i].center for i in ids])
    est_c = np.stack([est_poses[i].center for i in ids])
    return ids, umeyama_align(gt_c, est_c)


def pose_errors(gt_poses, est_poses):
    """Per-frame rotation errors (degrees) and ATE RMSE after alignment."""
    ids, sim = align_poses(gt_poses, est_poses)
    rot = {}
    for i in ids:
        # World-side gauge: R_est acts on est coordinates, which relate to
        # ground truth by x_gt = s R_sim x_est + t, so the comparable
        # rotation is R_est R_sim^T.
        R_pred = est_poses[i].R @ sim.R.T
        rot[i] = rotation_error(gt_poses[i].R, R_pred)
    gt_c = np.stack([gt_poses[i].center for i in ids])
    est_c = np.stack([est_poses[i].center for i in ids])
    ate = ate_rmse(gt_c, est_c, sim)
    return ids, sim, rot, ate


def evaluate_reconstruction(gt_poses, est_poses, gt_surface,
                            points=None, mesh_samples=None,
                            tau_frac=0.035):
    """Full metrics dict: rotation, ATE, Acc/Prec, Chamfer, schema tag."""
    gt_surface = np.asarray(gt_surface, dtype=np.float64)
    lo, hi = gt_surface.min(axis=0), gt_surface.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    ids, sim, rot, ate = pose_errors(gt_poses, est_poses)
    tau = tau_frac * diameter
    metrics = {
        "schema": SCHEMA_VERSION,
        "n_poses": len(ids),
        "n_gt_poses": len(gt_poses),
        "rotation_deg_mean": float(np.mean(list(rot.values()))),
        "rotation_deg_per_frame": {str(i): rot[i] for i in ids},
        "ate_rmse": ate,
        "ate_frac_diameter": ate / diameter,
        "diameter": diameter,
        "tau": tau,
    }
    if points is not None and len(points):
        aligned = sim.apply(np.asarray(points, dtype=np.float64))
        acc, prec = pointcloud_acc_prec(aligned, gt_surface, tau=tau)
        metrics["n_points"] = int(len(points))
        metrics["acc"] = acc
        metrics["prec"] = prec
    if mesh_samples is not None and len(mesh_samples):
        aligned = sim.apply(np.asarray(mesh_samples, dtype=np.float64))
        metrics["chamfer_l1"] = chamfer_l1(aligned, gt_surface)
    return metrics


def run_report(state):
    """Ground-truth-free metrics of a finished reconstruction state."""
    from .nba import reprojection_energy
    from .pipeline.scene import ACTIVE

    active = int((state.points.status == ACTIVE).sum())
    report = {
        "schema": SCHEMA_VERSION,
        "registered": sorted(state.poses),
        "n_registered": len(state.poses),
        "n_images": len(state.graph.nodes),
        "n_points": len(state.points),
        "n_active_points": active,
        "n_tracks": len(state.tracks),
        "reprojection_energy_px": reprojection_energy(state),
        "counters": {k: state.counters[k] for k in sorted(state.counters)},
    }
    return report


def write_metrics(path, metrics):
    """Deterministic metrics.json (sorted keys, fixed indentation)."""
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
