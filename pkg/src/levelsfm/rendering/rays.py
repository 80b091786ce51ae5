"""Ray construction and clipping against the field's cube domain."""

import torch


def clip_to_cube(o, v, bound, t_min=0.0):
    """Slab-clip rays against [-bound, bound]^3.

    o, v: (B, 3) origins and unit directions.  Returns (t_near, t_far,
    valid); invalid rays never intersect the cube in front of t_min.
    """
    safe = torch.where(v.abs() > 1e-12, v, torch.full_like(v, 1e-12))
    lo = (-bound - o) / safe
    hi = (bound - o) / safe
    t0 = torch.minimum(lo, hi).amax(dim=-1)
    t1 = torch.maximum(lo, hi).amin(dim=-1)
    t_near = t0.clamp_min(t_min)
    valid = t1 > t_near
    return t_near, t1, valid


def camera_rays(R, t, intr, px):
    """World rays through pixel centers for a world-to-camera pose.

    R: (3,3) tensor, t: (3,) tensor (may carry gradients); px: (B,2)
    tensor of pixel coordinates.  Returns (origins (B,3), unit dirs (B,3)).
    """
    dtype = R.dtype
    fx = torch.as_tensor(intr.fx, dtype=dtype)
    fy = torch.as_tensor(intr.fy, dtype=dtype)
    cx = torch.as_tensor(intr.cx, dtype=dtype)
    cy = torch.as_tensor(intr.cy, dtype=dtype)
    xn = (px[:, 0] - cx) / fx
    yn = (px[:, 1] - cy) / fy
    d_cam = torch.stack([xn, yn, torch.ones_like(xn)], dim=-1)
    d_world = d_cam @ R  # R^T applied row-wise
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    center = -(R.transpose(0, 1) @ t)
    o = center.unsqueeze(0).expand_as(d_world)
    return o, d_world


def inside_bound(x, bound):
    """Mask of points inside the cube domain."""
    return (x.abs() <= bound).all(dim=-1)
