"""Initial pair selection, camera placement, field pretraining, two-view init."""

import numpy as np
import torch

from ..errors import InitializationDiverged, NoViablePair
from ..geometry import CameraPose
from ..geometry.rotations import rot_x, rot_y, rot_z
from ..losses import (
    depth_consistency,
    eikonal_loss,
    rgb_loss,
    two_view_reprojection,
)
from ..rendering import eikonal_samples
from .common import (
    PlateauMonitor,
    make_optimizer,
    pose_tensors,
    random_pixels,
    render_pixel_rays,
    sample_image,
    trace_pixel_rays,
)
from .triangulate import verify_points


def select_initial_pair(graph):
    """Edge maximizing inliers x median triangulation angle; ties to low ids."""
    if not graph.edges:
        raise NoViablePair("scene graph has no verified pairs")
    best = None
    for (a, b), pair in graph.edges.items():
        score = pair.inlier_count * pair.median_angle
        key = (-score, a, b)
        if best is None or key < best[0]:
            best = (key, (a, b))
    return best[1]


def place_initial_cameras(relative, mode="inside", r=3.0, baseline_len=0.5):
    """First camera on the radius-r sphere, second from the relative pose.

    The first world-to-camera rotation is Rx(tx)^-1 Ry(ty)^-1 Rz(tz)^-1
    with ty=-pi/4, tz=pi/4 and tx=0 (inside) or pi/2 (outside); its
    translation is R applied to the fixed camera-to-world offset, which
    puts the camera center at distance r looking through the origin in
    inside mode.  The second pose composes the unit-baseline relative
    pose, rescaled to baseline_len.
    """
    theta_x = 0.0 if mode == "inside" else 0.5 * np.pi
    theta_y = -0.25 * np.pi
    theta_z = 0.25 * np.pi
    R = rot_x(theta_x).T @ rot_y(theta_y).T @ rot_z(theta_z).T
    t_c2w = np.array([
        -r * np.cos(theta_y) * np.cos(theta_z),
        -r * np.cos(theta_y) * np.sin(theta_z),
        -r * np.sin(theta_y),
    ])
    P_a = CameraPose(R, R @ t_c2w)
    norm = np.linalg.norm(relative.t)
    t_rel = relative.t * (baseline_len / norm) if norm > 1e-12 else np.zeros(3)
    P_b = CameraPose(relative.R, t_rel).compose(P_a)
    return P_a, P_b


def pretrain_sdf(sdf, config, generator):
    """Fit the field to the analytic centered sphere of the configured radius.

    An untrained field cannot be sphere-traced; this gives tracing a
    well-conditioned starting surface.  Values alone leave the grid
    features crinkly (|grad| far from 1 between samples), which later
    destabilizes every eikonal-regularized stage, so the fit supervises
    the analytic gradient as well.
    """
    dtype = config.torch_dtype()
    adam = make_optimizer(config, sdf)
    r0 = config.pretrain_radius
    batch = config.pretrain_batch
    last = None
    for _ in range(config.pretrain_steps):
        x = (torch.rand(batch, 3, generator=generator, dtype=dtype) * 2 - 1)
        x = x * config.bound
        rad = torch.linalg.norm(x, dim=-1)
        target = rad - r0
        target_grad = x / rad.unsqueeze(-1).clamp_min(1e-9)
        pred = sdf.sdf(x)
        grad = sdf.gradient(x, create_graph=True)
        loss = ((pred - target) ** 2).mean() \
            + 0.1 * ((grad - target_grad) ** 2).sum(-1).mean()
        adam.zero_grad()
        loss.backward()
        adam.step()
        last = float(loss.detach())
    return last


def _image_tensor(state, image_id, dtype):
    img = state.images.get(image_id)
    if img is None:
        return None
    if not isinstance(img, torch.Tensor):
        img = torch.as_tensor(np.asarray(img), dtype=dtype)
        state.images[image_id] = img
    return img.to(dtype)


def _pair_losses(state, Ra, ta, Rb, tb, px_a, px_b, img_a, img_b, torch_gen):
    """One optimization step's loss terms for the initial pair."""
    cfg = state.config
    intr = state.intr
    sdf, radiance = state.sdf, state.radiance

    _, _, res_a, Xa, _, hit_a = trace_pixel_rays(Ra, ta, intr, px_a, sdf, cfg)
    _, _, res_b, Xb, _, hit_b = trace_pixel_rays(Rb, tb, intr, px_b, sdf, cfg)
    both = hit_a & hit_b
    l_reproj = two_view_reprojection(
        Xa, Xb, px_a, px_b, both, Ra, ta, Rb, tb, intr
    )

    visited = [Xa.detach()[hit_a], Xb.detach()[hit_b]]
    l_dc = px_a.new_zeros(())
    l_rgb = px_a.new_zeros(())
    n_r = max(2, cfg.rays_per_batch // 2)
    for R, t, img in ((Ra, ta, img_a), (Rb, tb, img_b)):
        px = random_pixels(torch_gen, n_r, intr, px_a.dtype)
        _, _, rend, ok = render_pixel_rays(R, t, intr, px, sdf, radiance, cfg)
        _, _, res_r, _, t_hat, hit_r = trace_pixel_rays(R, t, intr, px, sdf, cfg)
        l_dc = l_dc + depth_consistency(t_hat, rend.depth, hit_r & ok)
        if img is not None:
            target = sample_image(img, px)
            l_rgb = l_rgb + rgb_loss(rend.color, target)
        visited.append(rend.points.detach().reshape(-1, 3))

    samples = eikonal_samples(
        visited, cfg.eikonal_uniform, cfg.bound, generator=torch_gen,
        dtype=px_a.dtype,
    )
    grads = sdf.gradient(samples, create_graph=True)
    l_eik = eikonal_loss(grads)

    total = (
        cfg.alpha_reproj * l_reproj
        + cfg.alpha_eik * l_eik
        + cfg.alpha_rgb * 0.5 * l_rgb
        + cfg.alpha_dc * 0.5 * l_dc
    )
    return total, l_reproj


def _mean_pair_reprojection(state, Ra, ta, Rb, tb, px_a, px_b):
    """Audit value: mean symmetric pixel residual over hit pairs (no grad)."""
    cfg = state.config
    with torch.no_grad():
        _, _, _, Xa, _, hit_a = trace_pixel_rays(Ra, ta, state.intr, px_a, state.sdf, cfg)
        _, _, _, Xb, _, hit_b = trace_pixel_rays(Rb, tb, state.intr, px_b, state.sdf, cfg)
        both = hit_a & hit_b
        if not bool(both.any()):
            return float("inf"), Xa, Xb, both
        val = two_view_reprojection(Xa, Xb, px_a, px_b, both, Ra, ta, Rb, tb, state.intr)
        return float(val), Xa, Xb, both


def two_view_init(state, pair, torch_gen):
    """Joint field optimization on the initial pair, then point seeding.

    Poses stay fixed at their placed values; the SDF and radiance fields
    absorb the geometry.  Verified matches seed the point set with ray
    midpoints and two-track tuples.
    """
    cfg = state.config
    a, b = min(pair), max(pair)
    if not state.graph.has_edge(a, b):
        raise NoViablePair(f"pair ({a}, {b}) has no verified edge")
    edge = state.graph.edges[(a, b)]
    ia, ib = state.graph.matches(a, b)
    if len(ia) == 0:
        raise NoViablePair(f"pair ({a}, {b}) kept no inlier matches")

    P_a, P_b = place_initial_cameras(
        edge.rel_pose, cfg.mode, cfg.r_init, cfg.baseline_len
    )
    state.register_pose(a, P_a)
    state.register_pose(b, P_b)

    dtype = cfg.torch_dtype()
    Ra, ta = pose_tensors(P_a, dtype)
    Rb, tb = pose_tensors(P_b, dtype)
    px_a = torch.as_tensor(state.graph.keypoints[a][ia], dtype=dtype)
    px_b = torch.as_tensor(state.graph.keypoints[b][ib], dtype=dtype)
    img_a = _image_tensor(state, a, dtype)
    img_b = _image_tensor(state, b, dtype)

    adam = make_optimizer(cfg, state.sdf, state.radiance, refine=True)
    plateau = PlateauMonitor(cfg.plateau_window, cfg.plateau_rel)
    steps = 0
    for step in range(cfg.k_init):
        total, _ = _pair_losses(
            state, Ra, ta, Rb, tb, px_a, px_b, img_a, img_b, torch_gen
        )
        adam.zero_grad()
        total.backward()
        adam.step()
        steps = step + 1
        if plateau.update(float(total.detach())):
            break

    mean_px, Xa, Xb, both = _mean_pair_reprojection(
        state, Ra, ta, Rb, tb, px_a, px_b
    )
    if mean_px > 20.0:
        raise InitializationDiverged(
            f"mean reprojection {mean_px:.2f} px after {steps} init steps"
        )

    views = [(Ra, ta, px_a), (Rb, tb, px_b)]
    accept, mid, sdf_mid, resid = verify_points(
        Xa, Xb, both, state.sdf, views, state.intr,
        cfg.delta_pair, cfg.delta_sdf, cfg.delta_px,
    )
    inserted = 0
    for idx in torch.nonzero(accept, as_tuple=True)[0].tolist():
        k = state.points.add(
            mid[idx].numpy(), sdf=float(sdf_mid[idx]), residual=float(resid[idx])
        )
        state.tracks.add(k, a, int(ia[idx]))
        state.tracks.add(k, b, int(ib[idx]))
        inserted += 1
    state.note(
        "two_view_init", pair=(a, b), steps=steps,
        mean_reproj_px=mean_px, points=inserted,
    )
    state.bump("init_steps", steps)
    return state
