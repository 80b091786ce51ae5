"""Analytic signed-distance scenes used as oracles and synthetic ground truth.

Every shape evaluates on torch tensors of shape (..., 3) and provides an
independent closed-form (or bisection) first-intersection routine so traced
results can be checked against something that never touches the tracer.
"""

import numpy as np
import torch

from .errors import UnknownScene


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


class Sphere:
    """d(x) = |x - c| - r.  Exact SDF."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)

    def sdf(self, x):
        x = _as_tensor(x)
        c = torch.as_tensor(self.center, dtype=x.dtype, device=x.device)
        return torch.linalg.norm(x - c, dim=-1) - self.radius

    def first_hit(self, o, v, t_near, t_far):
        """Smallest quadratic root in [t_near, t_far]; NaN when missing."""
        o = np.asarray(o, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        oc = o - self.center
        b = np.sum(oc * v, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        t = np.full(b.shape, np.nan)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        cand = np.where(t0 >= t_near, t0, t1)
        good = ok & (cand >= t_near) & (cand <= t_far)
        t[good] = cand[good]
        return t


class Plane:
    """Half-space SDF d(x) = offset - x·n (outside where d > 0)."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=1.0):
        n = np.asarray(normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def sdf(self, x):
        x = _as_tensor(x)
        n = torch.as_tensor(self.normal, dtype=x.dtype, device=x.device)
        return self.offset - (x * n).sum(dim=-1)

    def first_hit(self, o, v, t_near, t_far):
        o = np.asarray(o, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        vn = v @ self.normal
        on = o @ self.normal
        t = np.full(on.shape, np.nan)
        moving = np.abs(vn) > 1e-12
        tc = np.where(moving, (self.offset - on) / np.where(moving, vn, 1.0), np.nan)
        good = moving & (tc >= t_near) & (tc <= t_far)
        t[good] = tc[good]
        return t


class Union:
    """Hard min of child SDFs; exact outside the children's overlap."""

    def __init__(self, *shapes):
        self.shapes = shapes

    def sdf(self, x):
        ds = torch.stack([s.sdf(x) for s in self.shapes])
        return ds.min(dim=0).values

    def first_hit(self, o, v, t_near, t_far):
        ts = np.stack([s.first_hit(o, v, t_near, t_far) for s in self.shapes])
        ts = np.where(np.isnan(ts), np.inf, ts)
        t = ts.min(axis=0)
        return np.where(np.isinf(t), np.nan, t)


class Box:
    """Axis-aligned box SDF (exact)."""

    def __init__(self, center=(0.0, 0.0, 0.0), half_extent=(1.0, 1.0, 1.0)):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half_extent, dtype=np.float64)

    def sdf(self, x):
        x = _as_tensor(x)
        c = torch.as_tensor(self.center, dtype=x.dtype, device=x.device)
        h = torch.as_tensor(self.half, dtype=x.dtype, device=x.device)
        q = (x - c).abs() - h
        outside = torch.linalg.norm(q.clamp_min(0.0), dim=-1)
        inside = q.max(dim=-1).values.clamp_max(0.0)
        return outside + inside

    def first_hit(self, o, v, t_near, t_far):
        o = np.asarray(o, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        safe_v = np.where(np.abs(v) > 1e-12, v, 1e-12)
        lo = (self.center - self.half - o) / safe_v
        hi = (self.center + self.half - o) / safe_v
        tmin = np.minimum(lo, hi).max(axis=-1)
        tmax = np.maximum(lo, hi).min(axis=-1)
        t = np.full(tmin.shape, np.nan)
        good = (tmax >= tmin) & (tmax >= t_near) & (tmin <= t_far) & (tmin >= t_near)
        t[good] = tmin[good]
        return t


class Blobby:
    """Smooth union of spheres via the polynomial smooth-min.

    The smooth min never exceeds the hard min, so sphere tracing with its
    values cannot overshoot the surface.  first_hit falls back to sampling
    plus bisection since no closed form exists.
    """

    def __init__(self, centers, radii, k=0.35):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.radii = np.asarray(radii, dtype=np.float64)
        self.k = float(k)

    def sdf(self, x):
        x = _as_tensor(x)
        c = torch.as_tensor(self.centers, dtype=x.dtype, device=x.device)
        r = torch.as_tensor(self.radii, dtype=x.dtype, device=x.device)
        d = torch.linalg.norm(x.unsqueeze(-2) - c, dim=-1) - r  # (..., S)
        out = d[..., 0]
        for i in range(1, d.shape[-1]):
            b = d[..., i]
            h = (0.5 + 0.5 * (b - out) / self.k).clamp(0.0, 1.0)
            out = b * (1.0 - h) + out * h - self.k * h * (1.0 - h)
        return out

    def first_hit(self, o, v, t_near, t_far, n_coarse=512, iters=60):
        o = np.atleast_2d(np.asarray(o, dtype=np.float64))
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        ts = np.linspace(t_near, t_far, n_coarse)
        pts = o[:, None, :] + ts[None, :, None] * v[:, None, :]
        with torch.no_grad():
            d = self.sdf(torch.from_numpy(pts)).numpy()
        sign_change = (d[:, :-1] > 0) & (d[:, 1:] <= 0)
        out = np.full(len(o), np.nan)
        for i in range(len(o)):
            idx = np.nonzero(sign_change[i])[0]
            if len(idx) == 0:
                continue
            lo, hi = ts[idx[0]], ts[idx[0] + 1]
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                val = float(self.sdf(torch.tensor(o[i] + mid * v[i])))
                if val > 0:
                    lo = mid
                else:
                    hi = mid
            out[i] = 0.5 * (lo + hi)
        return out


def two_spheres():
    return Union(Sphere((-0.8, 0.0, 0.0), 0.9), Sphere((0.8, 0.2, 0.1), 0.7))


def box_union():
    return Union(Box((0.0, 0.0, -0.4), (1.0, 0.7, 0.5)), Sphere((0.0, 0.0, 0.6), 0.7))


def blobby():
    return Blobby(
        centers=[(-0.5, 0.0, 0.0), (0.5, 0.3, 0.1), (0.0, -0.4, 0.35), (0.1, 0.1, -0.45)],
        radii=[0.85, 0.7, 0.6, 0.65],
    )


_SCENES = {
    "sphere": lambda: Sphere(radius=1.2),
    "two-spheres": two_spheres,
    "box-union": box_union,
    "blobby": blobby,
}


def make_scene(name: str):
    """Analytic scene registry for the synthetic generator."""
    try:
        return _SCENES[name]()
    except KeyError:
        raise UnknownScene(f"unknown scene '{name}'; choose from {sorted(_SCENES)}") from None


def scene_names():
    return sorted(_SCENES)


def surface_samples(shape, n, rng, bound=4.0, batch=4096):
    """Draw ~n points on the zero set by tracing random inward rays."""
    pts = []
    while sum(len(p) for p in pts) < n:
        d = rng.normal(size=(batch, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = -d * (0.75 * bound)
        t = shape.first_hit(o, d, 0.0, 1.5 * bound)
        ok = np.isfinite(t)
        pts.append(o[ok] + t[ok, None] * d[ok])
    return np.concatenate(pts)[:n]
