"""Shared plumbing for the optimization stages."""

import numpy as np
import torch

from ..fields import AdamOptimizer, RadianceField, SdfField
from ..rendering import clip_to_cube, camera_rays, render_rays, trace_points


def make_fields(config, generator):
    """Instantiate the SDF and radiance fields per the run configuration."""
    dtype = config.torch_dtype()
    sdf = SdfField(
        config.sdf_grid.to_hash_config(config.bound),
        z_dim=config.feature_dim,
        hidden=config.sdf_hidden,
        n_hidden=config.sdf_layers,
        generator=generator,
        dtype=dtype,
    )
    radiance = RadianceField(
        config.radiance_grid.to_hash_config(config.bound),
        z_dim=config.feature_dim,
        n_freqs=config.view_freqs,
        hidden=config.radiance_hidden,
        n_hidden=config.radiance_layers,
        generator=generator,
        dtype=dtype,
    )
    return sdf, radiance


def field_groups(sdf, radiance=None):
    groups = {
        "sdf_grid": list(sdf.encoding.parameters()),
        "sdf_head": list(sdf.layers.parameters()),
    }
    if radiance is not None:
        groups["radiance_grid"] = list(radiance.encoding.parameters())
        groups["radiance_head"] = list(radiance.layers.parameters())
    return groups


def field_lrs(config, groups):
    lrs = {}
    for name in groups:
        lrs[name] = config.lr_grid if name.endswith("grid") else config.lr_head
    return lrs


def make_optimizer(config, sdf, radiance=None, pose_params=None, refine=False):
    """Stage optimizer over field (and optional pose) groups.

    refine=True scales the SDF groups down by refine_lr_scale: stages that
    start from an already-plausible surface need steps well below the
    from-scratch rate or Adam's constant-size updates erode the zero set.
    The radiance keeps full rates; it trains from scratch during init.
    """
    groups = field_groups(sdf, radiance)
    lrs = field_lrs(config, groups)
    if refine:
        for name in ("sdf_grid", "sdf_head"):
            if name in lrs:
                lrs[name] *= config.refine_lr_scale
    if pose_params:
        groups["poses"] = list(pose_params)
        lrs["poses"] = config.lr_pose
    return AdamOptimizer(groups, lrs)


class PlateauMonitor:
    """Flags convergence when consecutive loss-window means stop moving."""

    def __init__(self, window=50, rel=1e-4):
        self.window = max(1, int(window))
        self.rel = rel
        self._values = []
        self._prev = None

    def update(self, value):
        self._values.append(float(value))
        if len(self._values) < self.window:
            return False
        mean = sum(self._values) / len(self._values)
        self._values.clear()
        prev, self._prev = self._prev, mean
        if prev is None:
            return False
        return abs(mean - prev) / max(abs(prev), 1e-12) < self.rel


def pose_tensors(pose, dtype):
    """Constant torch (R, t) for a numpy CameraPose."""
    R = torch.as_tensor(np.ascontiguousarray(pose.R), dtype=dtype)
    t = torch.as_tensor(np.ascontiguousarray(pose.t), dtype=dtype)
    return R, t


def random_pixels(generator, n, intr, dtype):
    """Uniform continuous pixel positions inside the image rectangle."""
    u = torch.rand(n, 2, generator=generator, dtype=dtype)
    scale = torch.tensor(
        [intr.width - 1.0, intr.height - 1.0], dtype=dtype
    )
    return u * scale


def sample_image(image, px):
    """Bilinear color lookup; image (H,W,3) tensor, px (B,2) in pixels."""
    H, W = image.shape[0], image.shape[1]
    x = px[:, 0].clamp(0.0, W - 1.0)
    y = px[:, 1].clamp(0.0, H - 1.0)
    x0 = x.floor().long().clamp(0, W - 2)
    y0 = y.floor().long().clamp(0, H - 2)
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    c00 = image[y0, x0]
    c01 = image[y0, x0 + 1]
    c10 = image[y0 + 1, x0]
    c11 = image[y0 + 1, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def trace_pixel_rays(R, t, intr, px, sdf, config):
    """Trace rays through pixels; returns (o, v, result, X, t_hat, hit)."""
    o, v = camera_rays(R, t, intr, px)
    tn, tf, ok = clip_to_cube(o, v, config.bound)
    res, X, t_hat = trace_points(
        o, v, tn, tf, sdf, eps=config.trace_eps, n_max=config.trace_steps
    )
    hit = res.hit & ok
    return o, v, res, X, t_hat, hit


def render_pixel_rays(R, t, intr, px, sdf, radiance, config):
    """Volume-render rays through pixels; returns (o, v, RenderResult, valid)."""
    o, v = camera_rays(R, t, intr, px)
    tn, tf, ok = clip_to_cube(o, v, config.bound)
    tf = torch.where(ok, tf, tn + 1e-3)
    out = render_rays(o, v, tn, tf, sdf, radiance, config.beta, m=config.stamps)
    return o, v, out, ok
