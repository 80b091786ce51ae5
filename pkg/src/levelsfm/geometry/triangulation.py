"""Classical multi-view triangulation used for verification and fallbacks."""

import numpy as np

from ..errors import InsufficientCorrespondences, ParallelRays


def triangulate_dlt(obs, min_angle=1e-6):
    """Linear triangulation from two or more observations.

    obs: iterable of (intr, pose, px) tuples.  Minimizes the algebraic
    error of x ~ P X over homogeneous X.  Returns a world point (3,).
    Raises ParallelRays when no view pair subtends min_angle radians.
    """
    obs = list(obs)
    if len(obs) < 2:
        raise InsufficientCorrespondences("triangulation needs >= 2 views")
    dirs = []
    rows = []
    for intr, pose, px in obs:
        px = np.asarray(px, dtype=np.float64)
        xn = intr.normalize(px)
        d = pose.R.T @ np.array([xn[0], xn[1], 1.0])
        dirs.append(d / np.linalg.norm(d))
        P = intr.K @ np.concatenate([pose.R, pose.t[:, None]], axis=1)
        rows.append(px[0] * P[2] - P[0])
        rows.append(px[1] * P[2] - P[1])
    best_angle = max(
        ray_angle(dirs[i], dirs[j])
        for i in range(len(dirs))
        for j in range(i + 1, len(dirs))
    )
    if best_angle < min_angle:
        raise ParallelRays(f"max triangulation angle {best_angle:.3g} rad")
    A = np.stack(rows)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        raise ParallelRays("triangulated point at infinity")
    return X[:3] / X[3]


def ray_midpoint(o1, d1, o2, d2, min_sin=1e-6):
    """Midpoint of the common perpendicular of two rays.

    Raises ParallelRays when the directions are too close to parallel for
    the closest-point system to be well conditioned.
    """
    o1 = np.asarray(o1, dtype=np.float64)
    o2 = np.asarray(o2, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    n1 = d1 / np.linalg.norm(d1)
    n2 = d2 / np.linalg.norm(d2)
    cross = np.cross(n1, n2)
    if np.linalg.norm(cross) < min_sin:
        raise ParallelRays("ray directions are parallel")
    # [t1, t2] from the orthogonality of the connecting segment.
    b = o2 - o1
    a11 = 1.0
    a12 = -float(n1 @ n2)
    a22 = 1.0
    b1 = float(n1 @ b)
    b2 = -float(n2 @ b)
    det = a11 * a22 - a12 * a12
    t1 = (b1 * a22 - a12 * b2) / det
    t2 = (a11 * b2 - a12 * b1) / det
    p1 = o1 + t1 * n1
    p2 = o2 + t2 * n2
    return 0.5 * (p1 + p2)


def ray_angle(d1, d2):
    """Angle in radians between two ray directions."""
    n1 = np.asarray(d1, dtype=np.float64)
    n2 = np.asarray(d2, dtype=np.float64)
    c = float(n1 @ n2) / (np.linalg.norm(n1) * np.linalg.norm(n2))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
