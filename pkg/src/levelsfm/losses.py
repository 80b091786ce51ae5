"""Differentiable loss terms shared by initialization, registration, and NBA.

All functions accept torch tensors and keep the graph intact; validity
masks are plain bools and never receive gradients.  Pixel-space norms are
stabilized with a tiny epsilon so exactly-zero residuals (exact synthetic
data, planted fixed points) keep a finite, zero gradient.
"""

import torch

_NORM_EPS = 1e-12
_MIN_DEPTH = 1e-6


def stable_norm(r, dim=-1):
    """sqrt(sum r^2 + eps); gradient is zero (not NaN) at r = 0."""
    return torch.sqrt((r * r).sum(dim=dim) + _NORM_EPS)


def project_points(R, t, X, intr):
    """Pinhole projection of world points under a world-to-camera pose.

    Returns (px (N,2), depth (N,)).  The division uses a clamped depth so
    gradients stay finite; callers gate on depth > 0 themselves.
    """
    Xc = X @ R.transpose(0, 1) + t
    z = Xc[:, 2]
    zs = z.clamp_min(_MIN_DEPTH)
    u = intr.fx * Xc[:, 0] / zs + intr.cx
    v = intr.fy * Xc[:, 1] / zs + intr.cy
    return torch.stack([u, v], dim=-1), z


def two_view_reprojection(Xa, Xb, px_a, px_b, valid, Ra, ta, Rb, tb, intr,
                          mask_px=None, reduce="mean"):
    """Symmetric traced-point reprojection distance, averaged over 2V terms.

    Xa holds points traced along image a's keypoint rays; they project
    into image b and compare against the matched pixels px_b (and the
    mirror image for Xb).  valid gates pairs whose traces missed.  With
    mask_px set, pairs whose current (detached) cross-view disagreement
    reaches the threshold drop out of this round as well.  reduce="parts"
    returns (residual sum, pair count) so callers pooling several pair
    sets can form a single mean.
    """
    pa, za = project_points(Rb, tb, Xa, intr)
    pb, zb = project_points(Ra, ta, Xb, intr)
    ra = stable_norm(pa - px_b)
    rb = stable_norm(pb - px_a)
    ok = valid & (za > _MIN_DEPTH) & (zb > _MIN_DEPTH)
    if mask_px is not None:
        with torch.no_grad():
            ok = ok & (ra < mask_px) & (rb < mask_px)
    n = int(ok.sum())
    total = (ra[ok] + rb[ok]).sum() if n else Xa.new_zeros(())
    if reduce == "parts":
        return total, n
    return total / (2.0 * n) if n else total


def depth_consistency(t_hat, rendered_depth, valid):
    """Mean |traced depth - rendered depth| over rays whose trace hit."""
    n = int(valid.sum())
    if n == 0:
        return rendered_depth.new_zeros(())
    return (t_hat[valid] - rendered_depth[valid]).abs().mean()


def rgb_loss(pred, target):
    """Mean absolute color error."""
    return (pred - target).abs().mean()


def eikonal_loss(grads, squared=True):
    """Unit-gradient-norm penalty; squared by default, absolute otherwise."""
    r = stable_norm(grads) - 1.0
    return (r * r).mean() if squared else r.abs().mean()


def tracing_loss(X_traced, X_tracks, valid):
    """Mean distance between freshly traced points and their stored points."""
    n = int(valid.sum())
    if n == 0:
        return X_traced.new_zeros(())
    return stable_norm(X_traced[valid] - X_tracks[valid]).mean()


def view_reprojection(X, px, R, t, intr):
    """Mean 3D-2D reprojection distance of known points in one view.

    Points that land behind the camera are excluded from the average.
    """
    p, z = project_points(R, t, X, intr)
    ok = z > _MIN_DEPTH
    n = int(ok.sum())
    if n == 0:
        return X.new_zeros(())
    return stable_norm(p[ok] - px[ok]).mean()
