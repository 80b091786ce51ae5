"""Classical multi-view geometry: cameras, minimal solvers, metrics."""

from .camera import (
    CameraPose,
    Intrinsics,
    backproject,
    look_at_pose,
    pixel_rays,
    project,
    project_many,
)
from .epnp import epnp, epnp_solve
from .fivepoint import (
    decompose_essential,
    essential_from_pose,
    estimate_relative_pose,
    five_point_candidates,
    sampson_error,
)
from .metrics import (
    SimilarityTransform,
    ate_rmse,
    chamfer_l1,
    pointcloud_acc_prec,
    rotation_error,
    umeyama_align,
)
from .ransac import ransac
from .rotations import (
    exp_so3,
    hat,
    log_so3,
    project_to_rotation,
    quat_from_rotation,
    rot_x,
    rot_y,
    rot_z,
    rotation_from_quat,
)
from .triangulation import ray_angle, ray_midpoint, triangulate_dlt

__all__ = [
    "CameraPose",
    "Intrinsics",
    "SimilarityTransform",
    "ate_rmse",
    "backproject",
    "chamfer_l1",
    "decompose_essential",
    "epnp",
    "epnp_solve",
    "essential_from_pose",
    "estimate_relative_pose",
    "exp_so3",
    "five_point_candidates",
    "hat",
    "log_so3",
    "look_at_pose",
    "pixel_rays",
    "pointcloud_acc_prec",
    "project",
    "project_many",
    "project_to_rotation",
    "quat_from_rotation",
    "ransac",
    "ray_angle",
    "ray_midpoint",
    "rot_x",
    "rot_y",
    "rot_z",
    "rotation_error",
    "rotation_from_quat",
    "sampson_error",
    "triangulate_dlt",
    "umeyama_align",
]
