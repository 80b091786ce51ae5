"""Incremental reconstruction: ingest, initialize, register, triangulate."""

from .ingest import (
    ingest,
    parse_image_list,
    parse_intrinsics,
    parse_matches,
    verify_pair,
)
from .initialization import (
    place_initial_cameras,
    pretrain_sdf,
    select_initial_pair,
    two_view_init,
)
from .reconstruct import next_best_view, reconstruct
from .registration import correspondences_2d3d, register_frame
from .scene import (
    ACTIVE,
    OUTLIER,
    PairMatches,
    ReconstructionState,
    SceneGraph,
    ScenePointSet,
    TrackStore,
)
from .triangulate import sdf_triangulate, verify_point, verify_points

__all__ = [
    "ACTIVE",
    "OUTLIER",
    "PairMatches",
    "ReconstructionState",
    "SceneGraph",
    "ScenePointSet",
    "TrackStore",
    "correspondences_2d3d",
    "ingest",
    "next_best_view",
    "parse_image_list",
    "parse_intrinsics",
    "parse_matches",
    "place_initial_cameras",
    "pretrain_sdf",
    "reconstruct",
    "register_frame",
    "sdf_triangulate",
    "select_initial_pair",
    "two_view_init",
    "verify_pair",
    "verify_point",
    "verify_points",
]
