"""Neural bundle adjustment: level-set projection plus joint refinement.

Instead of moving 3D points as free Adam variables, each step snaps every
scope point to the nearest zero crossing of the signed distance field and
differentiates the reprojection error through that projection, so the
field and the camera poses absorb the correction while the point set
stays on the surface by construction.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonFiniteGradient, ProjectionStalled
from .fields import PoseVariable
from .geometry.camera import project_many
from .losses import project_points, rgb_loss, stable_norm
from .pipeline.common import (
    PlateauMonitor,
    make_optimizer,
    random_pixels,
    render_pixel_rays,
    sample_image,
)
from .pipeline.scene import ACTIVE
from .pipeline.triangulate import observation_residuals

_MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class NbaScope:
    """Which frames one adjustment run touches, and for how many steps.

    kind "oneFrame" covers exactly the newest frame, "local" the newest
    frame plus its registered graph neighbors, "global" every registered
    frame.  The affected points are those observed in the scope frames.
    """

    kind: str
    frames: tuple
    budget: int

    def __post_init__(self):
        if self.kind not in ("oneFrame", "local", "global"):
            raise ValueError(f"unknown scope kind {self.kind!r}")


def one_frame_scope(state, image):
    return NbaScope("oneFrame", (image,), state.config.nba_one_frame)


def local_scope(state, image):
    frames = [image] + [
        n for n in state.graph.neighbors(image) if state.is_registered(n)
    ]
    return NbaScope("local", tuple(sorted(set(frames))), state.config.nba_local)


def global_scope(state):
    return NbaScope(
        "global", tuple(sorted(state.poses)), state.config.nba_global
    )


def surface_project(X, sdf_field, delta_sdf, max_steps=5, raise_on_stall=False):
    """Pull points onto the zero set by repeated first-order steps.

    Each step moves X by -sdf(X) along the gradient; when the gradient
    norm strays from 1 by more than 0.1 the step divides by the squared
    norm instead (same fixed point, robust off the eikonal manifold).
    Points whose |sdf| fails to decrease are returned unmoved with their
    stalled flag set.  The output stays differentiable with respect to
    the field for points that moved.
    """
    cur = X
    d0_abs = None
    for _ in range(max_steps):
        d = sdf_field.sdf(cur)
        abs_d = d.detach().abs()
        if d0_abs is None:
            d0_abs = abs_d
        need = abs_d >= 0.5 * delta_sdf
        if not bool(need.any()):
            break
        g = sdf_field.gradient(cur, create_graph=torch.is_grad_enabled())
        norm2 = (g * g).sum(dim=-1)
        off = (norm2.sqrt() - 1.0).abs() > 0.1
        denom = torch.where(off, norm2.clamp_min(1e-12), torch.ones_like(norm2))
        step = (d / denom).unsqueeze(-1) * g
        cur = torch.where(need.unsqueeze(-1), cur - step, cur)
    if d0_abs is None:
        d0_abs = sdf_field.sdf(X).detach().abs()
    d_final = sdf_field.sdf(cur).detach().abs()
    stalled = (d_final >= d0_abs) & (d0_abs >= 0.5 * delta_sdf)
    if bool(stalled.any()):
        if raise_on_stall:
            raise ProjectionStalled(
                f"{int(stalled.sum())} of {len(stalled)} points failed to descend"
            )
        cur = torch.where(stalled.unsqueeze(-1), X, cur)
    return cur, stalled


def _scope_observations(state, frames):
    """Scope point ids plus per-frame (rows, pixels) observation arrays."""
    pts = set()
    for i in frames:
        for _, k in state.tracks.points_in_image(i):
            if state.points.status[k] == ACTIVE:
                pts.add(k)
    ids = sorted(pts)
    row = {k: r for r, k in enumerate(ids)}
    per_frame = []
    for i in frames:
        rows, px = [], []
        for j, k in state.tracks.points_in_image(i):
            if k in row:
                rows.append(row[k])
                px.append(state.graph.keypoints[i][j])
        if rows:
            per_frame.append((i, np.asarray(rows), np.asarray(px)))
    return ids, per_frame


def reprojection_energy(state, scope=None):
    """Mean pixel reprojection residual over the scope's track observations."""
    if scope is None:
        frames = sorted(state.poses)
    else:
        frames = sorted(set(scope.frames) & set(state.poses))
    ids, per_frame = _scope_observations(state, frames)
    if not per_frame:
        return 0.0
    xyz = state.points.xyz[ids]
    total, count = 0.0, 0
    for i, rows, px in per_frame:
        p, _ = project_many(xyz[rows], state.intr, state.poses[i])
        total += float(np.linalg.norm(p - px, axis=1).sum())
        count += len(rows)
    return total / count


def _audit_scope(state, ids):
    """Re-verify scope points; demote those off the surface or misprojecting."""
    cfg = state.config
    if not ids:
        return 0
    with torch.no_grad():
        X = torch.as_tensor(state.points.xyz[ids], dtype=cfg.torch_dtype())
        sdf_abs = state.sdf.sdf(X).abs().double().numpy()
    demoted = 0
    for pos, k in enumerate(ids):
        worst, mean = observation_residuals(
            state, state.points.xyz[k], state.tracks.observations(k)
        )
        if sdf_abs[pos] > cfg.delta_sdf or worst > cfg.delta_px:
            state.points.mark_outlier(k)
            demoted += 1
        else:
            state.points.record_audit([k], [sdf_abs[pos]], [mean])
    return demoted


def run_nba(state, scope, torch_gen):
    """One bundle-adjustment run over the scope's frames and points.

    Each step projects the scope points to the level set, measures the
    reprojection error of the projected points in every scope frame (plus
    a color term for the one-frame variant), and steps the field and pose
    parameters; the points themselves then take the detached projected
    coordinates.  Non-finite steps are skipped and counted.  Afterwards
    every scope point is re-audited and failures are demoted.
    """
    cfg = state.config
    frames = sorted(f for f in set(scope.frames) if state.is_registered(f))
    ids, per_frame = _scope_observations(state, frames)
    energy_before = reprojection_energy(state, scope)
    if not ids or not per_frame:
        state.note("run_nba", kind=scope.kind, frames=len(frames),
                   points=0, steps=0, skipped=0, demoted=0,
                   energy_before=energy_before, energy_after=energy_before,
                   audits=[])
        return state
    dtype = cfg.torch_dtype()
    intr = state.intr

    posevars = {
        i: PoseVariable(state.poses[i].R, state.poses[i].t, dtype=dtype)
        for i in frames
    }
    pose_params = [p for i in frames for p in posevars[i].parameters()]
    radiance = state.radiance if scope.kind == "oneFrame" else None
    adam = make_optimizer(cfg, state.sdf, radiance, pose_params)

    obs = [
        (i, torch.as_tensor(rows, dtype=torch.long),
         torch.as_tensor(px, dtype=dtype))
        for i, rows, px in per_frame
    ]
    orig = torch.as_tensor(state.points.xyz[ids], dtype=dtype)
    cur = orig
    new_frame = scope.frames[0] if scope.kind == "oneFrame" else None
    img = state.images.get(new_frame) if new_frame is not None else None
    if img is not None and not isinstance(img, torch.Tensor):
        img = torch.as_tensor(np.asarray(img), dtype=dtype)
        state.images[new_frame] = img

    plateau = PlateauMonitor(cfg.plateau_window, cfg.plateau_rel)
    window, audits = [], []
    steps = skipped = 0
    for _ in range(scope.budget):
        Xp, _ = surface_project(cur, state.sdf, cfg.delta_sdf)
        total = None
        count = 0
        for i, rows, px in obs:
            R, t = posevars[i].matrices()
            p, z = project_points(R, t, Xp[rows], intr)
            r = stable_norm(p - px)
            ok = z > _MIN_DEPTH
            n = int(ok.sum())
            if n:
                s = r[ok].sum()
                total = s if total is None else total + s
                count += n
        loss = total / count if count else cur.new_zeros(())
        if img is not None:
            R, t = posevars[new_frame].matrices()
            pxr = random_pixels(torch_gen, cfg.rays_per_batch, intr, dtype)
            _, _, rend, _ = render_pixel_rays(
                R, t, intr, pxr, state.sdf, state.radiance, cfg
            )
            loss = loss + rgb_loss(rend.color, sample_image(img, pxr))
        if not torch.isfinite(loss):
            skipped += 1
            continue
        if loss.requires_grad:
            adam.zero_grad()
            loss.backward()
            try:
                adam.step()
            except NonFiniteGradient:
                skipped += 1
                continue
        cur = Xp.detach()
        steps += 1
        window.append(float(loss.detach()))
        if len(window) >= cfg.plateau_window:
            audits.append(sum(window) / len(window))
            window.clear()
        if plateau.update(float(loss.detach())):
            break
    if window:
        audits.append(sum(window) / len(window))

    # Untouched variables are not written back: the float32 round trip
    # (and the rotation re-projection) would perturb an exact fixed point.
    for i in frames:
        if float(posevars[i].delta.detach().abs().max()) > 0:
            state.register_pose(i, posevars[i].numpy_pose())
    moved = (cur != orig).any(dim=1).numpy()
    if moved.any():
        kept = np.asarray(ids, dtype=np.int64)[moved]
        state.points.set_coords(kept, cur.numpy()[moved])
    demoted = _audit_scope(state, ids)
    energy_after = reprojection_energy(state, scope)
    state.note("run_nba", kind=scope.kind, frames=len(frames),
               points=len(ids), steps=steps, skipped=skipped,
               demoted=demoted, energy_before=energy_before,
               energy_after=energy_after, audits=audits)
    state.bump(f"nba_{scope.kind}_steps", steps)
    return state
