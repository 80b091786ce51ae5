"""Shared builders: small fast configs, fitted fields, planted scenes."""

import numpy as np
import torch

from levelsfm.config import GridSpec, RunConfig
from levelsfm.losses import project_points
from levelsfm.pipeline.common import make_fields, make_optimizer, pose_tensors
from levelsfm.pipeline.scene import PairMatches, ReconstructionState, SceneGraph
from levelsfm.shapes import make_scene, surface_samples
from levelsfm.synthetic import _visible_mask, default_intrinsics, ring_poses

torch.set_num_threads(1)


def tiny_config(**over):
    """Small grids and budgets that keep unit tests in seconds."""
    base = dict(
        sdf_grid=GridSpec(levels=6, n_min=16, n_max=256,
                          features=2, table_size=2 ** 13),
        radiance_grid=GridSpec(levels=6, n_min=16, n_max=256,
                               features=2, table_size=2 ** 13),
        sdf_hidden=32,
        sdf_layers=1,
        radiance_hidden=32,
        radiance_layers=1,
        feature_dim=16,
        view_freqs=2,
        stamps=32,
        rays_per_batch=64,
        eikonal_uniform=32,
        pretrain_steps=500,
        pretrain_batch=256,
        k_init=600,
        k_reg=150,
        k_tri=150,
        nba_one_frame=60,
        nba_local=80,
        nba_global=200,
        plateau_window=30,
    )
    base.update(over)
    return RunConfig(**base)


def fit_field_to_shape(shape, cfg, seed=0, steps=2500, jitter=0.05):
    """Regress the SDF (and leave radiance fresh) onto an analytic shape.

    Batches mix uniform cube samples with jittered surface samples so the
    zero set is tight where the tests probe it.  Returns (sdf, radiance,
    torch generator) with the generator advanced past the fit.
    """
    gen = torch.Generator()
    gen.manual_seed(seed)
    sdf, radiance = make_fields(cfg, gen)
    rng = np.random.default_rng(seed)
    dtype = cfg.torch_dtype()
    surf = torch.as_tensor(surface_samples(shape, 4096, rng), dtype=dtype)
    adam = make_optimizer(cfg, sdf)
    half = cfg.pretrain_batch // 2
    for _ in range(steps):
        xu = (torch.rand(half, 3, generator=gen, dtype=dtype) * 2 - 1) * cfg.bound
        idx = torch.randint(0, surf.shape[0], (half,), generator=gen)
        xs = surf[idx] + torch.randn(half, 3, generator=gen, dtype=dtype) * jitter
        x = torch.cat([xu, xs])
        target = shape.sdf(x)
        loss = ((sdf.sdf(x) - target) ** 2).mean()
        adam.zero_grad()
        loss.backward()
        adam.step()
    return sdf, radiance, gen


def _fd_normals(shape, X, h=1e-4):
    """Unit finite-difference SDF gradients of an analytic shape."""
    g = np.zeros_like(X)
    with torch.no_grad():
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            dp = shape.sdf(torch.from_numpy(X + e)).numpy()
            dm = shape.sdf(torch.from_numpy(X - e)).numpy()
            g[:, a] = (dp - dm) / (2 * h)
    return g / (np.linalg.norm(g, axis=1, keepdims=True) + 1e-12)


def project_to_level_set(sdf, X, iters=30, tol=1e-5):
    """Tight Newton descent onto the fitted zero set; returns kept points."""
    cur = X.clone()
    for _ in range(iters):
        d = sdf.sdf(cur).detach()
        if float(d.abs().max()) < tol:
            break
        g = sdf.gradient(cur).detach()
        denom = (g * g).sum(dim=-1).clamp_min(1e-12)
        cur = (cur - (d / denom)[:, None] * g).detach()
    keep = sdf.sdf(cur).abs() < 1e-4
    return cur[keep].detach()


def planted_state(shape_name="sphere", n_views=8, n_points=150, seed=0,
                  cfg=None, fit_steps=2500, observe_views=None,
                  register=None, edges=True):
    """Reconstruction state planted at an exact self-consistent optimum.

    The SDF is fitted to the analytic shape, points sit on the *fitted*
    zero set, and every stored keypoint is the float32 projection of its
    point, so reprojection residuals are bitwise zero under the planted
    poses.  Returns (state, gt_poses dict).
    """
    cfg = cfg or tiny_config()
    shape = make_scene(shape_name)
    sdf, radiance, gen = fit_field_to_shape(shape, cfg, seed=seed, steps=fit_steps)
    intr = default_intrinsics()
    poses = {i: p for i, p in enumerate(ring_poses(n_views))}
    dtype = cfg.torch_dtype()

    rng = np.random.default_rng(seed + 1)
    raw = torch.as_tensor(surface_samples(shape, 4 * n_points, rng), dtype=dtype)
    X = project_to_level_set(sdf, raw)[:n_points]

    X_np = X.double().numpy()
    normals = _fd_normals(shape, X_np)
    vis = {}
    for i in sorted(poses):
        if observe_views is not None and i not in observe_views:
            continue
        ok = _visible_mask(shape, poses[i], intr, X_np)
        # Keep clear of the silhouette: grazing rays trace unreliably.
        to_cam = poses[i].center - X_np
        cosang = (normals * to_cam).sum(axis=1) / (
            np.linalg.norm(to_cam, axis=1) + 1e-12
        )
        ok &= cosang > 0.25
        vis[i] = ok

    keep = np.zeros(X.shape[0], dtype=int)
    for i in vis:
        keep += vis[i].astype(int)
    keep = keep >= 2
    X = X[torch.as_tensor(keep)]
    for i in vis:
        vis[i] = vis[i][keep]

    graph = SceneGraph()
    for i in sorted(poses):
        graph.add_node(i)
    kp = {}
    kp_of = {}
    for i in sorted(vis):
        # Project exactly the per-view visible slice: the refinement loop
        # gathers the same rows, so the stored pixels reproduce bitwise.
        rows = np.nonzero(vis[i])[0]
        R, t = pose_tensors(poses[i], dtype)
        with torch.no_grad():
            px, _ = project_points(R, t, X[torch.as_tensor(rows)], intr)
        kp[i] = px.double().numpy()
        kp_of[i] = {int(r): j for j, r in enumerate(rows)}
        graph.set_keypoints(i, kp[i])

    if edges:
        ids = sorted(vis)
        for ai in range(len(ids)):
            for bi in range(ai + 1, len(ids)):
                a, b = ids[ai], ids[bi]
                shared = [r for r in kp_of[a] if r in kp_of[b]]
                if len(shared) < 2:
                    continue
                rel = poses[b].compose(poses[a].inverse())
                graph.add_edge(a, b, PairMatches(
                    idx_a=np.array([kp_of[a][r] for r in shared], dtype=np.int64),
                    idx_b=np.array([kp_of[b][r] for r in shared], dtype=np.int64),
                    inliers=np.ones(len(shared), dtype=bool),
                    rel_pose=rel,
                    median_angle=0.2,
                ))

    state = ReconstructionState(intr=intr, graph=graph, config=cfg)
    state.sdf = sdf
    state.radiance = radiance
    registered = sorted(vis) if register is None else sorted(register)
    for i in registered:
        state.register_pose(i, poses[i])
    for r in range(X.shape[0]):
        k = state.points.add(X[r].double().numpy())
        for i in sorted(vis):
            if i in registered and bool(vis[i][r]):
                state.tracks.add(k, i, kp_of[i][r])
    return state, poses
