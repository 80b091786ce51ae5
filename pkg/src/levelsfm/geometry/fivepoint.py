"""Minimal five-point relative pose: nullspace + polynomial action matrix.

Solves for the essential matrix from five normalized correspondences by
expanding det(E) = 0 and the trace constraint 2 E E^T E - tr(E E^T) E = 0
into ten cubic equations over the 4-dim nullspace coefficients, then reading
roots off the multiplication-by-x action matrix of the quotient ring.
"""

import numpy as np

from ..errors import DegenerateConfiguration, InsufficientCorrespondences
from .ransac import ransac
from .rotations import hat

# Monomial bases (exponent triples over x, y, z), graded so the ten cubic
# monomials divisible by lower ones come first.
_MONOS1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MONOS2 = [
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
    (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_MONOS3 = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
] + _MONOS2


def _prod_table(ma, mb, mout):
    lookup = {m: i for i, m in enumerate(mout)}
    table = np.empty((len(ma), len(mb)), dtype=np.int64)
    for i, ea in enumerate(ma):
        for j, eb in enumerate(mb):
            table[i, j] = lookup[tuple(a + b for a, b in zip(ea, eb))]
    return table


_P11 = _prod_table(_MONOS1, _MONOS1, _MONOS2)
_P21 = _prod_table(_MONOS2, _MONOS1, _MONOS3)


def _mul11(a, b):
    """Product of degree-1 polynomials; trailing axis is the coefficient axis."""
    out = np.zeros(a.shape[:-1] + (10,))
    for i in range(4):
        for j in range(4):
            out[..., _P11[i, j]] += a[..., i] * b[..., j]
    return out


def _mul21(a, b):
    """Degree-2 times degree-1 polynomial product."""
    out = np.zeros(a.shape[:-1] + (20,))
    for i in range(10):
        for j in range(4):
            out[..., _P21[i, j]] += a[..., i] * b[..., j]
    return out


def essential_nullspace(q1, q2):
    """Four-dimensional nullspace of the epipolar constraints.

    q1, q2: (n>=5, 2) normalized image coordinates with q2^T E q1 = 0.
    Returns (4, 3, 3) basis; the solution is x*B0 + y*B1 + z*B2 + B3.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    n = len(q1)
    if n < 5:
        raise InsufficientCorrespondences(f"five-point solver got {n} pairs")
    h1 = np.concatenate([q1, np.ones((n, 1))], axis=1)
    h2 = np.concatenate([q2, np.ones((n, 1))], axis=1)
    A = (h2[:, :, None] * h1[:, None, :]).reshape(n, 9)
    _, _, Vt = np.linalg.svd(A)
    return Vt[-4:][::-1].reshape(4, 3, 3)


def _constraint_matrix(basis):
    """10x20 coefficient matrix of the cubic constraints on (x, y, z)."""
    # E entries as degree-1 polynomials: coeffs over (x, y, z, 1).
    E = np.moveaxis(basis, 0, -1)  # (3, 3, 4)

    def m2(i, j, k, l):
        return _mul11(E[i, j], E[k, l])

    # det(E) by cofactor expansion along the first row.
    det = (
        _mul21(m2(1, 1, 2, 2) - m2(1, 2, 2, 1), E[0, 0])
        - _mul21(m2(1, 0, 2, 2) - m2(1, 2, 2, 0), E[0, 1])
        + _mul21(m2(1, 0, 2, 1) - m2(1, 1, 2, 0), E[0, 2])
    )

    EEt = np.zeros((3, 3, 10))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                EEt[i, j] += m2(i, k, j, k)
    trace = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]

    rows = [det]
    for i in range(3):
        for j in range(3):
            acc = np.zeros(20)
            for k in range(3):
                acc += _mul21(EEt[i, k], E[k, j])
            rows.append(2.0 * acc - _mul21(trace, E[i, j]))
    return np.stack(rows)


def five_point_candidates(q1, q2):
    """All real essential matrices consistent with five correspondences.

    Returns a list of unit-norm (3, 3) matrices; empty when the sample is
    degenerate.
    """
    basis = essential_nullspace(q1, q2)
    M = _constraint_matrix(basis)
    try:
        C = np.linalg.solve(M[:, :10], M[:, 10:])
    except np.linalg.LinAlgError:
        return []
    if not np.all(np.isfinite(C)):
        return []

    # Action of multiplication by x on the basis
    # [x^2, xy, xz, y^2, yz, z^2, x, y, z, 1] of the quotient ring.
    A = np.zeros((10, 10))
    A[:6] = -C[:6]
    A[6, 0] = 1.0
    A[7, 1] = 1.0
    A[8, 2] = 1.0
    A[9, 6] = 1.0

    w, V = np.linalg.eig(A)
    out = []
    for i in range(10):
        if abs(w[i].imag) > 1e-6 * (1.0 + abs(w[i].real)):
            continue
        v = V[:, i].real
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6] / v[9], v[7] / v[9], v[8] / v[9]
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        nrm = np.linalg.norm(E)
        if nrm < 1e-12 or not np.isfinite(nrm):
            continue
        out.append(E / nrm)
    return out


def essential_from_pose(R, t):
    """E with x2^T E x1 = 0 when X2 = R X1 + t."""
    return hat(np.asarray(t, dtype=np.float64)) @ np.asarray(R, dtype=np.float64)


def decompose_essential(E, q1, q2):
    """Relative pose (R, t) from E by chirality majority vote.

    q1, q2: normalized correspondences used for the vote.  t has unit norm.
    Returns (R, t, n_front) for the candidate placing the most points in
    front of both cameras.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = U.copy()
        U[:, 2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt = Vt.copy()
        Vt[2, :] *= -1
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    best = None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for tc in (t, -t):
            n_front = _count_in_front(R, tc, q1, q2)
            if best is None or n_front > best[2]:
                best = (R, tc, n_front)
    if best[2] == 0:
        raise DegenerateConfiguration("no decomposition places points in front")
    return best


def _count_in_front(R, t, q1, q2):
    """Midpoint-free cheirality count via the linear two-ray depth solve."""
    n = len(q1)
    d1 = np.concatenate([q1, np.ones((n, 1))], axis=1)
    d2 = np.concatenate([q2, np.ones((n, 1))], axis=1)
    # Solve z1 * (R d1) + t = z2 * d2 in least squares per correspondence.
    Rd1 = d1 @ R.T
    count = 0
    for i in range(n):
        A = np.stack([Rd1[i], -d2[i]], axis=1)
        z, *_ = np.linalg.lstsq(A, -t, rcond=None)
        if z[0] > 0 and z[1] > 0:
            count += 1
    return count


def sampson_error(F, px1, px2):
    """First-order geometric reprojection error of x2^T F x1 = 0, in pixels."""
    px1 = np.asarray(px1, dtype=np.float64)
    px2 = np.asarray(px2, dtype=np.float64)
    n = len(px1)
    h1 = np.concatenate([px1, np.ones((n, 1))], axis=1)
    h2 = np.concatenate([px2, np.ones((n, 1))], axis=1)
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.sum(h2 * Fx1, axis=1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


def estimate_relative_pose(
    px1,
    px2,
    intr,
    rng,
    thresh_px=1.0,
    confidence=0.9999,
    max_iters=10000,
):
    """Robust two-view relative pose from pixel correspondences.

    Returns (R, t, inlier_mask) with X2 = R X1 + t and |t| = 1.  Scoring
    uses the Sampson error of the induced fundamental matrix so the
    threshold is in pixels.
    """
    px1 = np.asarray(px1, dtype=np.float64)
    px2 = np.asarray(px2, dtype=np.float64)
    q1 = intr.normalize(px1)
    q2 = intr.normalize(px2)
    Kinv = intr.K_inv

    def solver(idx):
        return five_point_candidates(q1[idx], q2[idx])

    def scorer(E):
        F = Kinv.T @ E @ Kinv
        return sampson_error(F, px1, px2) < thresh_px**2

    E, mask = ransac(
        len(px1), 5, solver, scorer, rng,
        max_iters=max_iters, confidence=confidence,
    )
    if E is None or mask.sum() < 5:
        raise DegenerateConfiguration("relative pose estimation found no model")
    R, t, _ = decompose_essential(E, q1[mask], q2[mask])
    return R, t, mask
