"""Synthetic scenes with analytic ground truth for end-to-end verification.

A camera ring orbits an analytic SDF shape; ground-truth 3D points are
sampled on the surface and projected into every view where they are
visible (in frame, front-facing, unoccluded).  Matches between nearby
views carry bounded pixel noise, and a controllable fraction of them is
replaced by wrong associations that demonstrably violate the pair's
epipolar geometry.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import (
    CameraPose,
    Intrinsics,
    essential_from_pose,
    look_at_pose,
    pixel_rays,
    project_many,
)
from .shapes import Blobby, make_scene

_DEFAULT_SIZE = 128
_COARSE_STEPS = 256
_BISECT_ITERS = 40


def default_intrinsics(size=_DEFAULT_SIZE):
    f = float(size)
    return Intrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                      width=size, height=size)


def ring_poses(n_views, radius=3.0, elevation=-0.25 * np.pi,
               start_azimuth=0.25 * np.pi):
    """World-to-camera poses on a circle, all aimed at the origin."""
    poses = []
    for i in range(n_views):
        az = start_azimuth + 2.0 * np.pi * i / n_views
        center = radius * np.array([
            np.cos(elevation) * np.cos(az),
            np.cos(elevation) * np.sin(az),
            np.sin(elevation),
        ])
        poses.append(look_at_pose(center, (0.0, 0.0, 0.0)))
    return poses


def first_hit(shape, o, v, t_near, t_far):
    """Vectorized analytic first intersection; NaN where the ray misses.

    Closed-form shapes answer directly; the blobby shape gets a batched
    coarse march plus bisection (its own routine bisects one ray at a
    time, far too slow for image rendering).
    """
    if not isinstance(shape, Blobby):
        return shape.first_hit(o, v, t_near, t_far)
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = len(o)
    ts = np.linspace(t_near, t_far, _COARSE_STEPS)
    out = np.full(n, np.nan)
    with torch.no_grad():
        chunk = max(1, 2_000_000 // _COARSE_STEPS)
        for s in range(0, n, chunk):
            oc, vc = o[s:s + chunk], v[s:s + chunk]
            pts = oc[:, None, :] + ts[None, :, None] * vc[:, None, :]
            d = shape.sdf(torch.from_numpy(pts)).numpy()
            change = (d[:, :-1] > 0) & (d[:, 1:] <= 0)
            has = change.any(axis=1)
            idx = np.argmax(change, axis=1)
            lo = ts[idx].copy()
            hi = ts[idx + 1].copy()
            rows = np.nonzero(has)[0]
            if len(rows) == 0:
                continue
            lo, hi = lo[rows], hi[rows]
            ob, vb = oc[rows], vc[rows]
            for _ in range(_BISECT_ITERS):
                mid = 0.5 * (lo + hi)
                val = shape.sdf(
                    torch.from_numpy(ob + mid[:, None] * vb)
                ).numpy()
                pos = val > 0
                lo = np.where(pos, mid, lo)
                hi = np.where(pos, hi, mid)
            out[s + rows] = 0.5 * (lo + hi)
    return out


def texture(X):
    """Smooth trigonometric RGB color field over 3D points, in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    r = 0.5 + 0.45 * np.sin(3.1 * X[..., 0] + 1.3 * X[..., 1] + 0.7)
    g = 0.5 + 0.45 * np.sin(2.3 * X[..., 1] + 1.9 * X[..., 2] + 2.1)
    b = 0.5 + 0.45 * np.sin(2.7 * X[..., 2] + 1.1 * X[..., 0] + 4.0)
    return np.stack([r, g, b], axis=-1)


def render_image(shape, pose, intr, bound=4.0):
    """Analytic render: textured surface on a dark background, float (H,W,3)."""
    ys, xs = np.mgrid[0:intr.height, 0:intr.width]
    px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    o, v = pixel_rays(px, intr, pose)
    t = first_hit(shape, o, v, 0.0, 2.5 * bound)
    img = np.full((len(px), 3), 0.08)
    hit = np.isfinite(t)
    img[hit] = texture(o[hit] + t[hit, None] * v[hit])
    return img.reshape(intr.height, intr.width, 3)


def _visible_mask(shape, pose, intr, X, margin=4.0):
    """In-frame, in-front, front-facing, and unoccluded from this camera."""
    px, z = project_many(X, intr, pose)
    ok = (z > 0.1) & intr.contains(px, -margin)
    c = pose.center
    to_cam = c - X
    dist = np.linalg.norm(to_cam, axis=1)
    # Front-facing: SDF gradient (finite differences) points toward camera.
    h = 1e-4
    with torch.no_grad():
        grads = np.zeros_like(X)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            dp = shape.sdf(torch.from_numpy(X + e)).numpy()
            dm = shape.sdf(torch.from_numpy(X - e)).numpy()
            grads[:, a] = (dp - dm) / (2 * h)
    ok &= (grads * to_cam).sum(axis=1) > 0
    # Unoccluded: the ray from the camera reaches the point itself.
    idx = np.nonzero(ok)[0]
    if len(idx):
        v = -to_cam[idx] / dist[idx, None]
        t = first_hit(shape, np.broadcast_to(c, (len(idx), 3)), v,
                      0.0, dist[idx].max() + 1.0)
        good = np.isfinite(t) & (np.abs(t - dist[idx]) < 5e-3 * dist[idx])
        ok[idx] = good
    return ok


def epipolar_residuals_px(pose_a, pose_b, intr, px_a, px_b):
    """Symmetric epipolar line distance in pixels under the relative pose."""
    rel = pose_b.compose(pose_a.inverse())
    E = essential_from_pose(rel.R, rel.t)
    F = intr.K_inv.T @ E @ intr.K_inv
    pa = np.concatenate([np.atleast_2d(px_a), np.ones((len(np.atleast_2d(px_a)), 1))], axis=1)
    pb = np.concatenate([np.atleast_2d(px_b), np.ones((len(np.atleast_2d(px_b)), 1))], axis=1)
    lb = pa @ F.T
    la = pb @ F
    num = np.abs(np.sum(pb * lb, axis=1))
    da = num / np.linalg.norm(la[:, :2], axis=1)
    db = num / np.linalg.norm(lb[:, :2], axis=1)
    return 0.5 * (da + db)


@dataclass
class SyntheticScene:
    """Ground truth plus generated observations for one synthetic dataset."""

    name: str
    shape: object
    intr: Intrinsics
    poses: list
    points: np.ndarray                    # (M, 3) ground-truth surface points
    keypoints: dict = field(default_factory=dict)   # view -> (K, 2) pixels
    keypoint_point: dict = field(default_factory=dict)  # view -> (K,) gt index or -1
    matches: dict = field(default_factory=dict)     # (a, b) -> (ja, jb) arrays
    outliers: dict = field(default_factory=dict)    # (a, b) -> bool array
    surface: np.ndarray = None            # eval surface samples
    sigma_px: float = 0.0
    rho: float = 0.0
    seed: int = 0

    @property
    def diameter(self):
        lo = self.surface.min(axis=0)
        hi = self.surface.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def generate_scene(name, n_views=10, sigma_px=0.0, rho=0.0, seed=0,
                   n_points=400, n_surface=2000, pair_window=2,
                   intr=None, radius=3.0, bound=4.0):
    """Build a synthetic dataset with audited ground-truth consistency.

    Every non-outlier match reprojects its ground-truth point within
    sigma_px (noise is clipped to that radius); every outlier violates
    the pair's epipolar constraint by more than 3 px.
    """
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    rng = np.random.default_rng(seed)
    shape = make_scene(name)
    intr = intr or default_intrinsics()
    poses = ring_poses(n_views, radius=radius)
    X = surface_samples_fast(shape, n_points, rng, bound=bound)
    surface = surface_samples_fast(shape, n_surface, rng, bound=bound)

    visible = np.stack(
        [_visible_mask(shape, p, intr, X) for p in poses]
    )  # (n_views, M)

    keypoints = {}
    keypoint_point = {}
    kp_index = {}  # (view, gt idx) -> keypoint id
    for i in range(n_views):
        px, _ = project_many(X, intr, poses[i])
        if sigma_px > 0:
            noise = rng.normal(0.0, sigma_px / 2.0, size=px.shape)
            norms = np.linalg.norm(noise, axis=1, keepdims=True)
            scale = np.minimum(1.0, sigma_px / np.maximum(norms, 1e-12))
            px = px + noise * scale
        ids = np.nonzero(visible[i])[0]
        keypoints[i] = px[ids]
        keypoint_point[i] = ids.copy()
        for j, m in enumerate(ids):
            kp_index[(i, int(m))] = j

    matches = {}
    outliers = {}
    for a in range(n_views):
        for off in range(1, pair_window + 1):
            b = (a + off) % n_views
            lo, hi = min(a, b), max(a, b)
            if lo == hi or (lo, hi) in matches:
                continue
            common = np.nonzero(visible[lo] & visible[hi])[0]
            if len(common) == 0:
                continue
            ja = np.array([kp_index[(lo, int(m))] for m in common])
            jb = np.array([kp_index[(hi, int(m))] for m in common])
            out = rng.random(len(common)) < rho
            for slot in np.nonzero(out)[0]:
                jb[slot] = _inject_outlier(
                    rng, keypoints, lo, hi, poses, intr,
                    keypoints[lo][ja[slot]], keypoint_point,
                )
            matches[(lo, hi)] = (ja, jb)
            outliers[(lo, hi)] = out

    scene = SyntheticScene(
        name=name, shape=shape, intr=intr, poses=poses, points=X,
        keypoints=keypoints, keypoint_point=keypoint_point,
        matches=matches, outliers=outliers, surface=surface,
        sigma_px=sigma_px, rho=rho, seed=seed,
    )
    _audit_scene(scene)
    return scene


def surface_samples_fast(shape, n, rng, bound=4.0):
    """Surface samples through the vectorized first-hit (blobby-friendly)."""
    pts = []
    have = 0
    while have < n:
        d = rng.normal(size=(4096, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = -d * (0.75 * bound)
        t = first_hit(shape, o, d, 0.0, 1.5 * bound)
        ok = np.isfinite(t)
        pts.append(o[ok] + t[ok, None] * d[ok])
        have += int(ok.sum())
    return np.concatenate(pts)[:n]


def _inject_outlier(rng, keypoints, a, b, poses, intr, px_a, keypoint_point):
    """Append a bogus keypoint to view b that breaks epipolar geometry > 3 px."""
    for _ in range(200):
        cand = rng.uniform([0.0, 0.0], [intr.width - 1.0, intr.height - 1.0])
        resid = epipolar_residuals_px(
            poses[a], poses[b], intr, px_a[None], cand[None]
        )
        if resid[0] > 3.0:
            j = len(keypoints[b])
            keypoints[b] = np.vstack([keypoints[b], cand[None]])
            keypoint_point[b] = np.append(keypoint_point[b], -1)
            return j
    raise RuntimeError("could not draw an epipolar-violating outlier pixel")


def _audit_scene(scene):
    """Generation-time consistency audit of every non-outlier match."""
    tol = scene.sigma_px + 1e-9
    for (a, b), (ja, jb) in sorted(scene.matches.items()):
        out = scene.outliers[(a, b)]
        for side, js, view in ((0, ja, a), (1, jb, b)):
            gt_ids = scene.keypoint_point[view][js[~out]]
            assert np.all(gt_ids >= 0)
            px, z = project_many(scene.points[gt_ids], scene.intr,
                                 scene.poses[view])
            assert np.all(z > 0)
            err = np.linalg.norm(px - scene.keypoints[view][js[~out]], axis=1)
            if len(err):
                assert err.max() <= tol, f"match audit failed: {err.max()}"


def write_scene(scene, out_dir, images=True):
    """Write the dataset files the reconstruction CLI consumes.

    Layout: intrinsics.txt, matches.txt, images.txt plus <id>.png,
    gt_poses.txt, gt_surface.txt, meta.json.  All writers are
    byte-deterministic for a fixed scene.
    """
    from .export import write_poses

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = scene.intr
    (out / "intrinsics.txt").write_text(
        f"PINHOLE {intr.width} {intr.height} "
        f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g}\n"
    )
    lines = ["LEVELSFM_MATCHES 1"]
    for (a, b) in sorted(scene.matches):
        ja, jb = scene.matches[(a, b)]
        lines.append(f"PAIR {a} {b} {len(ja)}")
        pa = scene.keypoints[a][ja]
        pb = scene.keypoints[b][jb]
        for (xa, ya), (xb, yb) in zip(pa, pb):
            lines.append(f"{xa:.6f} {ya:.6f} {xb:.6f} {yb:.6f}")
    (out / "matches.txt").write_text("\n".join(lines) + "\n")

    image_lines = []
    for i in range(len(scene.poses)):
        name = f"{i:04d}.png"
        image_lines.append(f"{i} {name}")
        if images:
            img = render_image(scene.shape, scene.poses[i], intr)
            _write_png(out / name, img)
    (out / "images.txt").write_text("\n".join(image_lines) + "\n")

    write_poses(out / "gt_poses.txt", dict(enumerate(scene.poses)))
    np.savetxt(out / "gt_surface.txt", scene.surface, fmt="%.17g")
    meta = {
        "scene": scene.name,
        "n_views": len(scene.poses),
        "sigma_px": scene.sigma_px,
        "rho": scene.rho,
        "seed": scene.seed,
        "n_points": int(len(scene.points)),
        "diameter": scene.diameter,
        "matches": {f"{a}-{b}": int(len(ja))
                    for (a, b), (ja, _) in sorted(scene.matches.items())},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def _write_png(path, img):
    from PIL import Image

    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_images(image_list_path):
    """Read the id->path list and decode each image to float (H,W,3) in [0,1]."""
    from PIL import Image

    from .pipeline.ingest import parse_image_list

    base = Path(image_list_path)
    entries = parse_image_list(base, require_exists=True)
    images = {}
    for image_id, path in entries.items():
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
        images[image_id] = arr / 255.0
    return images
