"""The incremental loop: initialize, then register/triangulate/adjust."""

import numpy as np
import torch

from ..errors import LevelSfmError
from ..nba import global_scope, local_scope, one_frame_scope, run_nba
from .common import make_fields
from .initialization import pretrain_sdf, select_initial_pair, two_view_init
from .registration import correspondences_2d3d, register_frame
from .scene import ACTIVE, ReconstructionState
from .triangulate import dlt_triangulate_frame, sdf_triangulate


def next_best_view(state):
    """Unregistered image with the largest 3D-2D support, or None.

    None means done or stalled: every image is registered, or no remaining
    candidate reaches the 6 correspondences a PnP solve needs.  Ties go to
    the smaller image id.
    """
    best = None
    for i in sorted(state.graph.nodes):
        if state.is_registered(i):
            continue
        ks, _ = correspondences_2d3d(state, i)
        if len(ks) >= 6 and (best is None or len(ks) > best[1]):
            best = (i, len(ks))
    return None if best is None else best[0]


def reconstruct(graph, intrinsics, config, images=None, seed=0,
                triangulation="sdf", adjust=True):
    """Run the full incremental reconstruction over a verified scene graph.

    images (optional) maps image id to an (H,W,3) array in [0,1] for the
    color terms; geometry-only runs work without it.  All randomness comes
    from the seed.  Stage errors propagate with the partial state attached
    as err.state so callers can still export what was built.

    triangulation="dlt" swaps the level-set triangulation stage for the
    linear two-view solver, and adjust=False skips every adjustment pass;
    both exist for ablation comparisons.
    """
    if triangulation not in ("sdf", "dlt"):
        raise ValueError(f"unknown triangulation mode {triangulation!r}")
    rng = np.random.default_rng(seed)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(seed)
    state = ReconstructionState(intr=intrinsics, graph=graph, config=config)
    if images:
        state.images.update(images)
    try:
        state.sdf, state.radiance = make_fields(config, torch_gen)
        loss0 = pretrain_sdf(state.sdf, config, torch_gen)
        state.note("pretrain", steps=config.pretrain_steps, loss=loss0)
        pair = select_initial_pair(graph)
        two_view_init(state, pair, torch_gen)
        state.tracks.audit_bijective()
        while True:
            nxt = next_best_view(state)
            if nxt is None:
                break
            register_frame(state, nxt, rng, torch_gen)
            if triangulation == "sdf":
                sdf_triangulate(state, nxt, torch_gen)
            else:
                dlt_triangulate_frame(state, nxt)
            state.tracks.audit_bijective()
            if adjust:
                run_nba(state, one_frame_scope(state, nxt), torch_gen)
                run_nba(state, local_scope(state, nxt), torch_gen)
                state.tracks.audit_bijective()
                if len(state.registered_order) % config.nba_global_every == 0:
                    run_nba(state, global_scope(state), torch_gen)
        if adjust:
            run_nba(state, global_scope(state), torch_gen)
        state.tracks.audit_bijective()
    except LevelSfmError as err:
        err.state = state
        raise
    unregistered = sorted(set(graph.nodes) - set(state.poses))
    if unregistered:
        state.note("stalled", unregistered=unregistered)
    state.note(
        "done",
        registered=len(state.poses),
        points=int((state.points.status == ACTIVE).sum()),
    )
    return state
