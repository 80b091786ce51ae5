"""Point growth after registration: trace-agreement triangulation.

New 3D points come from matched rays traced to the learned surface; they
are accepted only when both traces land close together, on the zero set,
and reproject into every observing view.  Keypoints already covered by a
track pull the field toward consistency instead of spawning duplicates.
"""

import numpy as np
import torch

from ..geometry.camera import project_many
from ..losses import project_points, tracing_loss, two_view_reprojection
from .common import PlateauMonitor, make_optimizer, pose_tensors, trace_pixel_rays
from .scene import ACTIVE


def verify_points(Xa, Xb, valid, sdf_field, views, intr,
                  delta_pair, delta_sdf, delta_px):
    """Batch acceptance gate over traced point pairs.

    views lists (R, t, px) per observing view; the pair midpoint must sit
    in front of each camera and reproject within delta_px of the matched
    pixel.  Returns (accept mask, midpoints, |sdf(mid)|, mean residual).
    """
    with torch.no_grad():
        gap = torch.linalg.norm(Xa - Xb, dim=-1)
        ok = valid & (gap <= delta_pair)
        da = sdf_field.sdf(Xa).abs()
        db = sdf_field.sdf(Xb).abs()
        ok &= torch.maximum(da, db) <= delta_sdf
        mid = 0.5 * (Xa + Xb)
        resid = torch.zeros_like(gap)
        for R, t, px in views:
            p, z = project_points(R, t, mid, intr)
            r = torch.linalg.norm(p - px, dim=-1)
            ok &= (z > 0) & (r <= delta_px)
            resid = resid + r
        resid = resid / max(len(views), 1)
        sdf_mid = sdf_field.sdf(mid).abs()
    return ok, mid, sdf_mid, resid


def verify_point(X, Xp, sdf_field, views, intr, delta_pair, delta_sdf, delta_px):
    """Scalar acceptance check for one traced pair; see verify_points."""
    Xa = torch.atleast_2d(torch.as_tensor(X))
    Xb = torch.atleast_2d(torch.as_tensor(Xp, dtype=Xa.dtype))
    valid = torch.ones(Xa.shape[0], dtype=torch.bool)
    ok, _, _, _ = verify_points(
        Xa, Xb, valid, sdf_field, views, intr, delta_pair, delta_sdf, delta_px
    )
    return bool(ok[0])


def _collect_candidates(state, image):
    """Split the new frame's inlier matches by track coverage.

    Returns (ext, new): ext holds (j_new, k, neighbor, j_nbr) tuples whose
    neighbor keypoint already belongs to an active point; new maps each
    registered neighbor to untracked (j_new, j_nbr) match pairs.
    """
    tracks = state.tracks
    ext = []
    new = {}
    seen = set()
    for n in state.graph.neighbors(image):
        if not state.is_registered(n):
            continue
        ia, ib = state.graph.matches(image, n)
        for j_i, j_n in zip(ia.tolist(), ib.tolist()):
            if tracks.point_of(image, j_i) is not None:
                continue
            k = tracks.point_of(n, j_n)
            if k is not None:
                if state.points.status[k] == ACTIVE and (j_i, k) not in seen:
                    seen.add((j_i, k))
                    ext.append((j_i, k, n, j_n))
            else:
                new.setdefault(n, []).append((j_i, j_n))
    ext.sort()
    return ext, new


def observation_residuals(state, X, obs):
    """(worst, mean) pixel residual of a world point over (i, j) observations."""
    worst, total = 0.0, 0.0
    for i, j in obs:
        px, z = project_many(X[None], state.intr, state.poses[i])
        if z[0] <= 0:
            return float("inf"), float("inf")
        r = float(np.linalg.norm(px[0] - state.graph.keypoints[i][j]))
        worst = max(worst, r)
        total += r
    n = max(len(obs), 1)
    return worst, total / n


def _try_extend(state, k, image, j, X_new, sdf_new):
    """Attach observation (image, j) to point k when the fresh trace verifies."""
    cfg = state.config
    if state.points.status[k] != ACTIVE:
        return False
    Xk = state.points.xyz[k]
    if np.linalg.norm(X_new - Xk) > cfg.delta_pair:
        return False
    with torch.no_grad():
        sdf_k = float(state.sdf.sdf(
            torch.as_tensor(Xk[None], dtype=cfg.torch_dtype())
        ).abs())
    if max(abs(sdf_new), sdf_k) > cfg.delta_sdf:
        return False
    mid = 0.5 * (X_new + Xk)
    obs = state.tracks.observations(k) + [(image, j)]
    worst, mean = observation_residuals(state, mid, obs)
    if worst > cfg.delta_px:
        return False
    state.tracks.add(k, image, j)
    state.points.record_audit([k], [abs(sdf_new)], [mean])
    return True


def _merge_points(state, k1, k2):
    """Collapse two points linked by a match; the better-observed one wins."""
    n1 = state.tracks.n_observations(k1)
    n2 = state.tracks.n_observations(k2)
    keep, drop = (k1, k2) if (n1, -k1) >= (n2, -k2) else (k2, k1)
    state.tracks.merge(keep, drop)
    state.points.mark_outlier(drop)
    return keep


def sdf_triangulate(state, image, torch_gen):
    """Grow points and tracks from the newly registered frame.

    Matches whose neighbor-side keypoint is already tracked supply a
    trace-to-stored-point consistency term; fully untracked matches supply
    a masked symmetric reprojection term (pairs whose cross-view traced
    projections disagree by mask_px or more sit out the round).  The field
    from the best-scoring iterate (most traceable candidates, then lowest
    loss) is kept; the final traces are re-run and survivors inserted.
    """
    cfg = state.config
    intr = state.intr
    dtype = cfg.torch_dtype()
    ext, new = _collect_candidates(state, image)
    if not ext and not new:
        state.note("sdf_triangulate", image=image, extensions=0,
                   points=0, merges=0)
        return state

    Ri, ti = pose_tensors(state.poses[image], dtype)
    kp_i = state.graph.keypoints[image]

    ext_j = sorted({j for j, _, _, _ in ext})
    ext_row = {j: r for r, j in enumerate(ext_j)}
    px_ext = torch.as_tensor(kp_i[ext_j], dtype=dtype) if ext_j else None
    rows = torch.as_tensor([ext_row[j] for j, _, _, _ in ext], dtype=torch.long)
    X_stored = torch.as_tensor(
        state.points.xyz[[k for _, k, _, _ in ext]], dtype=dtype
    ) if ext else None

    nbr = []
    for n in sorted(new):
        pairs = new[n]
        Rn, tn = pose_tensors(state.poses[n], dtype)
        px_a = torch.as_tensor(kp_i[[p[0] for p in pairs]], dtype=dtype)
        px_b = torch.as_tensor(
            state.graph.keypoints[n][[p[1] for p in pairs]], dtype=dtype
        )
        nbr.append((n, pairs, Rn, tn, px_a, px_b))

    adam = make_optimizer(cfg, state.sdf, refine=True)
    plateau = PlateauMonitor(cfg.plateau_window, cfg.plateau_rel)
    steps = 0
    best_key, best_params = None, None
    for step in range(cfg.k_tri):
        loss = torch.zeros((), dtype=dtype)
        n_valid = 0
        if ext:
            _, _, _, Xe, _, hit_e = trace_pixel_rays(
                Ri, ti, intr, px_ext, state.sdf, cfg
            )
            loss = loss + tracing_loss(Xe[rows], X_stored, hit_e[rows])
            n_valid += int(hit_e[rows].sum())
        total, count = None, 0
        for _, _, Rn, tn, px_a, px_b in nbr:
            _, _, _, Xa, _, hit_a = trace_pixel_rays(Ri, ti, intr, px_a, state.sdf, cfg)
            _, _, _, Xb, _, hit_b = trace_pixel_rays(Rn, tn, intr, px_b, state.sdf, cfg)
            s, c = two_view_reprojection(
                Xa, Xb, px_a, px_b, hit_a & hit_b, Ri, ti, Rn, tn, intr,
                mask_px=cfg.mask_px, reduce="parts",
            )
            total = s if total is None else total + s
            count += c
        if count:
            loss = loss + total / (2.0 * count)
        n_valid += count
        # Constant-size optimizer steps can degrade an already-converged
        # field until traces stop hitting; keep the best iterate, scored
        # by how many candidates stay traceable and then by loss.
        key = (-n_valid, float(loss.detach()))
        if best_key is None or key < best_key:
            best_key = key
            best_params = [p.detach().clone() for p in state.sdf.parameters()]
        if not loss.requires_grad:
            break
        adam.zero_grad()
        loss.backward()
        adam.step()
        steps = step + 1
        if plateau.update(float(loss.detach())):
            break
    if best_params is not None:
        with torch.no_grad():
            for p, b in zip(state.sdf.parameters(), best_params):
                p.copy_(b)

    n_ext = n_new = n_merge = 0
    with torch.no_grad():
        if ext:
            _, _, _, Xe, _, hit_e = trace_pixel_rays(
                Ri, ti, intr, px_ext, state.sdf, cfg
            )
            sdf_e = state.sdf.sdf(Xe).abs()
            for (j_i, k, _, _) in ext:
                r = ext_row[j_i]
                if not bool(hit_e[r]):
                    continue
                k_now = state.tracks.point_of(image, j_i)
                if k_now is None:
                    if _try_extend(state, k, image, j_i,
                                   Xe[r].double().numpy(), float(sdf_e[r])):
                        n_ext += 1
                elif k_now != k and state.points.status[k] == ACTIVE:
                    _merge_points(state, k_now, k)
                    n_merge += 1
        for n, pairs, Rn, tn, px_a, px_b in nbr:
            _, _, _, Xa, _, hit_a = trace_pixel_rays(Ri, ti, intr, px_a, state.sdf, cfg)
            _, _, _, Xb, _, hit_b = trace_pixel_rays(Rn, tn, intr, px_b, state.sdf, cfg)
            views = [(Ri, ti, px_a), (Rn, tn, px_b)]
            accept, mid, sdf_mid, resid = verify_points(
                Xa, Xb, hit_a & hit_b, state.sdf, views, intr,
                cfg.delta_pair, cfg.delta_sdf, cfg.delta_px,
            )
            for idx, (j_i, j_n) in enumerate(pairs):
                if not bool(accept[idx]):
                    continue
                k_i = state.tracks.point_of(image, j_i)
                k_n = state.tracks.point_of(n, j_n)
                if k_i is None and k_n is None:
                    k = state.points.add(
                        mid[idx].double().numpy(),
                        sdf=float(sdf_mid[idx]), residual=float(resid[idx]),
                    )
                    state.tracks.add(k, image, j_i)
                    state.tracks.add(k, n, j_n)
                    n_new += 1
                elif k_i is None:
                    if _try_extend(state, k_n, image, j_i,
                                   Xa[idx].double().numpy(),
                                   float(state.sdf.sdf(Xa[idx:idx + 1]).abs())):
                        n_ext += 1
                elif k_n is None:
                    if _try_extend(state, k_i, n, j_n,
                                   Xb[idx].double().numpy(),
                                   float(state.sdf.sdf(Xb[idx:idx + 1]).abs())):
                        n_ext += 1
                elif k_i != k_n and state.points.status[k_i] == ACTIVE \
                        and state.points.status[k_n] == ACTIVE:
                    _merge_points(state, k_i, k_n)
                    n_merge += 1

    state.note("sdf_triangulate", image=image, steps=steps,
               extensions=n_ext, points=n_new, merges=n_merge)
    state.bump("triangulate_steps", steps)
    return state


def dlt_triangulate_frame(state, image):
    """Linear-triangulation stage used by the no-level-set ablation.

    Grows the same candidate set as sdf_triangulate but solves each pair
    with the linear two-view system and admits points on the reprojection
    threshold alone; no surface-consistency gates, no field updates.
    """
    from ..errors import ParallelRays
    from ..geometry.triangulation import triangulate_dlt

    cfg = state.config
    intr = state.intr
    ext, new = _collect_candidates(state, image)
    pose_i = state.poses[image]
    kp_i = state.graph.keypoints[image]
    n_ext = n_new = 0
    for j_i, k, _, _ in ext:
        if state.points.status[k] != ACTIVE:
            continue
        if state.tracks.point_of(image, j_i) is not None:
            continue
        obs = state.tracks.observations(k) + [(image, j_i)]
        worst, mean = observation_residuals(state, state.points.xyz[k], obs)
        if worst <= cfg.delta_px:
            state.tracks.add(k, image, j_i)
            state.points.record_audit(
                [k], [state.points.last_sdf[k]], [mean]
            )
            n_ext += 1
    for n in sorted(new):
        pose_n = state.poses[n]
        for j_i, j_n in new[n]:
            if state.tracks.point_of(image, j_i) is not None:
                continue
            if state.tracks.point_of(n, j_n) is not None:
                continue
            px_i = kp_i[j_i]
            px_n = state.graph.keypoints[n][j_n]
            try:
                X = triangulate_dlt(
                    [(intr, pose_i, px_i), (intr, pose_n, px_n)]
                )
            except ParallelRays:
                continue
            worst, mean = observation_residuals(
                state, X, [(image, j_i), (n, j_n)]
            )
            if worst <= cfg.delta_px:
                k = state.points.add(X, sdf=0.0, residual=mean)
                state.tracks.add(k, image, j_i)
                state.tracks.add(k, n, j_n)
                n_new += 1
    state.note("dlt_triangulate", image=image, extensions=n_ext, points=n_new)
    return state
