"""New-frame registration: PnP coarse pose, then joint photometric refinement."""

import numpy as np
import torch

from ..errors import InsufficientCorrespondences, RegistrationDiverged
from ..fields import PoseVariable
from ..geometry.camera import project_many
from ..geometry.epnp import epnp
from ..losses import rgb_loss, view_reprojection
from .common import (
    PlateauMonitor,
    make_optimizer,
    pose_tensors,
    random_pixels,
    render_pixel_rays,
    sample_image,
)
from .initialization import _image_tensor
from .scene import ACTIVE


def correspondences_2d3d(state, image):
    """Active 3D points matched to the image's keypoints through its tracks.

    Walks the image's registered graph neighbors and follows their tracked
    keypoints.  Returns (point ids, keypoint ids) with each keypoint and
    each point used at most once (first hit in sorted neighbor order wins).
    """
    by_keypoint = {}
    used_points = set()
    for n in state.graph.neighbors(image):
        if not state.is_registered(n):
            continue
        ia, ib = state.graph.matches(image, n)
        for j_i, j_n in zip(ia.tolist(), ib.tolist()):
            if j_i in by_keypoint:
                continue
            k = state.tracks.point_of(n, j_n)
            if k is None or k in used_points:
                continue
            if state.points.status[k] != ACTIVE:
                continue
            by_keypoint[j_i] = k
            used_points.add(k)
    js = sorted(by_keypoint)
    ks = [by_keypoint[j] for j in js]
    return np.asarray(ks, dtype=np.int64), np.asarray(js, dtype=np.int64)


def register_frame(state, image, rng, torch_gen):
    """Estimate and refine the new frame's pose against the learned scene.

    A RANSAC PnP solve on the 3D-2D correspondences seeds the pose; the
    refinement then descends reprojection plus color error with the pose,
    SDF, and radiance all live.  Color rays are drawn from the new image
    and its registered neighbors.
    """
    cfg = state.config
    intr = state.intr
    ks, js = correspondences_2d3d(state, image)
    if len(ks) < 6:
        raise InsufficientCorrespondences(
            f"image {image} has {len(ks)} 3D-2D correspondences, needs 6"
        )
    X = state.points.xyz[ks]
    px = state.graph.keypoints[image][js]
    pose0, _ = epnp(X, px, intr, rng, thresh_px=cfg.ransac_px_pnp)

    dtype = cfg.torch_dtype()
    posevar = PoseVariable(pose0.R, pose0.t, dtype=dtype)
    adam = make_optimizer(
        cfg, state.sdf, state.radiance, pose_params=posevar.parameters(),
        refine=True,
    )
    p0, z0 = project_many(X, intr, pose0)
    coarse_med = float(np.median(np.linalg.norm(p0 - px, axis=1)))
    if coarse_med < 0.1 and np.all(z0 > 0):
        # Adam cannot refine below its own step size; a sub-0.1 px pose
        # would only be degraded by further pose steps.
        adam.freeze("poses")
    plateau = PlateauMonitor(cfg.plateau_window, cfg.plateau_rel)
    X_t = torch.as_tensor(X, dtype=dtype)
    px_t = torch.as_tensor(px, dtype=dtype)

    rgb_views = [(image, None)]
    for n in state.graph.neighbors(image):
        if state.is_registered(n):
            rgb_views.append((n, pose_tensors(state.poses[n], dtype)))
    n_rays = max(2, cfg.rays_per_batch // len(rgb_views))

    steps = 0
    for step in range(cfg.k_reg):
        R_new, t_new = posevar.matrices()
        l_reproj = view_reprojection(X_t, px_t, R_new, t_new, intr)
        l_rgb = X_t.new_zeros(())
        for view_id, pose_rt in rgb_views:
            img = _image_tensor(state, view_id, dtype)
            if img is None:
                continue
            R, t = (R_new, t_new) if pose_rt is None else pose_rt
            pxr = random_pixels(torch_gen, n_rays, intr, dtype)
            _, _, rend, _ = render_pixel_rays(
                R, t, intr, pxr, state.sdf, state.radiance, cfg
            )
            l_rgb = l_rgb + rgb_loss(rend.color, sample_image(img, pxr))
        loss = cfg.beta_reproj * l_reproj + cfg.beta_rgb * l_rgb
        if not loss.requires_grad:
            break
        adam.zero_grad()
        loss.backward()
        adam.step()
        steps = step + 1
        if plateau.update(float(loss.detach())):
            break

    pose = posevar.numpy_pose()
    p, z = project_many(X, intr, pose)
    resid = np.linalg.norm(p - px, axis=1)
    resid[z <= 0] = np.inf
    median = float(np.median(resid))
    if median > 8.0:
        raise RegistrationDiverged(
            f"image {image}: median reprojection {median:.2f} px after refinement"
        )
    state.register_pose(image, pose)
    state.note("register_frame", image=image, steps=steps,
               correspondences=len(ks), median_px=median)
    state.bump("register_steps", steps)
    return state
