"""Camera registration from 3D-2D correspondences (control-point PnP)."""

import numpy as np

from ..errors import DegenerateConfiguration, InsufficientCorrespondences
from .camera import CameraPose
from .metrics import umeyama_align
from .ransac import ransac

# Pair ordering for the quadratic beta terms: index of beta_k * beta_l.
_BETA_PAIRS = [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2),
               (0, 3), (1, 3), (2, 3), (3, 3)]
_CTRL_PAIRS = [(i, j) for i in range(4) for j in range(i + 1, 4)]


def _control_points(X):
    """Centroid plus principal axes, scaled to the point spread."""
    c0 = X.mean(axis=0)
    centered = X - c0
    cov = centered.T @ centered / len(X)
    vals, vecs = np.linalg.eigh(cov)
    total = float(vals.sum())
    if total < 1e-18:
        raise DegenerateConfiguration("all reference points coincide")
    # Keep the barycentric basis invertible even for planar point sets.
    scale = np.sqrt(np.maximum(vals, 1e-8 * total))
    ctrl = [c0] + [c0 + scale[k] * vecs[:, k] for k in range(3)]
    return np.stack(ctrl)


def _barycentric(X, ctrl):
    Ch = np.concatenate([ctrl.T, np.ones((1, 4))], axis=0)
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    return np.linalg.solve(Ch, Xh.T).T


def _nullspace_vectors(alphas, px, intr):
    n = len(px)
    M = np.zeros((2 * n, 12))
    for j in range(4):
        a = alphas[:, j]
        M[0::2, 3 * j] = a * intr.fx
        M[0::2, 3 * j + 2] = a * (intr.cx - px[:, 0])
        M[1::2, 3 * j + 1] = a * intr.fy
        M[1::2, 3 * j + 2] = a * (intr.cy - px[:, 1])
    _, _, Vt = np.linalg.svd(M)
    return Vt[-4:][::-1].reshape(4, 4, 3)  # v[k] = 4 control points


def _rho_and_L(ctrl, V):
    """Distance targets and quadratic coefficient matrix over beta pairs."""
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in _CTRL_PAIRS])
    dv = np.stack([[V[k, i] - V[k, j] for i, j in _CTRL_PAIRS] for k in range(4)])
    L = np.zeros((6, 10))
    for col, (k, l) in enumerate(_BETA_PAIRS):
        prod = np.sum(dv[k] * dv[l], axis=1)
        L[:, col] = prod if k == l else 2.0 * prod
    return rho, L, dv


def _betas_case(L, rho, cols, full_idx):
    sol, *_ = np.linalg.lstsq(L[:, cols], rho, rcond=None)
    betas = np.zeros(4)
    betas[0] = np.sqrt(abs(sol[0]))
    # Cross terms beta_0*beta_k fix relative signs; the absolute sign is
    # resolved later by the positive-depth flip.
    if betas[0] > 0:
        for k in full_idx[1:]:
            col = cols.index(_BETA_PAIRS.index((0, k)))
            betas[k] = sol[col] / betas[0]
    return betas


def _gauss_newton_betas(betas, dv, rho, iters=8):
    for _ in range(iters):
        x = np.einsum("k,kpc->pc", betas, dv)
        r = np.sum(x * x, axis=1) - rho
        J = 2.0 * np.einsum("pc,kpc->pk", x, dv)
        try:
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        except np.linalg.LinAlgError:
            break
        betas = betas + step
    return betas


def _pose_from_betas(betas, V, alphas, X):
    ctrl_cam = np.einsum("k,kjc->jc", betas, V)
    pts_cam = alphas @ ctrl_cam
    if pts_cam[:, 2].mean() < 0:
        pts_cam = -pts_cam
    sim = umeyama_align(pts_cam, X, with_scale=False)
    return CameraPose(sim.R, sim.t)


def _reproj_rmse(pose, X, px, intr):
    Xc = X @ pose.R.T + pose.t
    z = Xc[:, 2]
    if np.any(z <= 0):
        return np.inf
    u = intr.fx * Xc[:, 0] / z + intr.cx
    v = intr.fy * Xc[:, 1] / z + intr.cy
    return float(np.sqrt(np.mean((u - px[:, 0]) ** 2 + (v - px[:, 1]) ** 2)))


def epnp_solve(X, px, intr):
    """Closed-form pose from >= 4 correspondences, no outlier handling.

    Expresses the points in a barycentric control-point basis, recovers the
    camera-frame control points from the projection nullspace, and solves
    the absolute scale from inter-control-point distances (three expansion
    cases, each polished by Gauss-Newton on the distance residuals).
    """
    X = np.asarray(X, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    if len(X) < 4:
        raise InsufficientCorrespondences(f"PnP needs >= 4 points, got {len(X)}")
    ctrl = _control_points(X)
    alphas = _barycentric(X, ctrl)
    V = _nullspace_vectors(alphas, px, intr)
    rho, L, dv = _rho_and_L(ctrl, V)

    candidates = []
    # Single-vector case: scale is linear in the distances.
    norms2 = L[:, 0]
    beta1 = float(np.sum(np.sqrt(rho * norms2)) / np.sum(norms2))
    candidates.append(np.array([beta1, 0.0, 0.0, 0.0]))
    candidates.append(_betas_case(L, rho, [0, 1, 2], [0, 1]))
    candidates.append(_betas_case(L, rho, [0, 1, 2, 3, 4, 5], [0, 1, 2]))

    best = None
    for betas in candidates:
        betas = _gauss_newton_betas(betas, dv, rho)
        try:
            pose = _pose_from_betas(betas, V, alphas, X)
        except DegenerateConfiguration:
            continue
        err = _reproj_rmse(pose, X, px, intr)
        if best is None or err < best[1]:
            best = (pose, err)
    if best is None:
        raise DegenerateConfiguration("PnP found no pose candidate")
    return best[0]


def epnp(X, px, intr, rng, thresh_px=4.0, confidence=0.9999, max_iters=10000):
    """Robust pose from 3D-2D correspondences.

    Returns (CameraPose, inlier_mask).  Inliers are reprojection residuals
    below thresh_px with positive depth; the final pose is refit on them.
    """
    X = np.asarray(X, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    if len(X) < 4:
        raise InsufficientCorrespondences(f"PnP needs >= 4 points, got {len(X)}")

    def solver(idx):
        try:
            return [epnp_solve(X[idx], px[idx], intr)]
        except (DegenerateConfiguration, np.linalg.LinAlgError):
            return []

    def scorer(pose):
        Xc = X @ pose.R.T + pose.t
        z = Xc[:, 2]
        safe = np.where(z > 0, z, 1.0)
        u = intr.fx * Xc[:, 0] / safe + intr.cx
        v = intr.fy * Xc[:, 1] / safe + intr.cy
        err2 = (u - px[:, 0]) ** 2 + (v - px[:, 1]) ** 2
        return (z > 0) & (err2 < thresh_px**2)

    sample = min(6, len(X))
    pose, mask = ransac(
        len(X), sample, solver, scorer, rng,
        max_iters=max_iters, confidence=confidence,
    )
    if pose is None or mask.sum() < 4:
        raise DegenerateConfiguration("PnP consensus below the minimal support")
    refined = epnp_solve(X[mask], px[mask], intr)
    if _reproj_rmse(refined, X[mask], px[mask], intr) <= _reproj_rmse(
        pose, X[mask], px[mask], intr
    ):
        pose = refined
    return pose, mask
