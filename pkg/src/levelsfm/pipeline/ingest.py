"""Parsers for correspondence inputs and geometric pair verification."""

import os

import numpy as np

from ..errors import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    MissingImage,
    ParseError,
)
from ..geometry import CameraPose, Intrinsics, estimate_relative_pose, ray_angle, ray_midpoint
from .scene import PairMatches, SceneGraph

MATCHES_MAGIC = "LEVELSFM_MATCHES"
MATCHES_VERSION = 1

# keypoints are unified across pairs by coordinate; quantization guards
# against formatting-level float drift
_KEY_SCALE = 10000.0


def parse_intrinsics(path):
    """Read `PINHOLE <w> <h> <fx> <fy> <cx> <cy>` into Intrinsics."""
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] != "PINHOLE" or len(parts) != 7:
                raise ParseError(
                    "expected 'PINHOLE <w> <h> <fx> <fy> <cx> <cy>'",
                    line=lineno, path=path,
                )
            try:
                w, h = int(parts[1]), int(parts[2])
                fx, fy, cx, cy = (float(p) for p in parts[3:])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from exc
            return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)
    raise ParseError("no PINHOLE line found", line=0, path=path)


def parse_matches(path):
    """Read raw match blocks: {(a, b): (pxA (n,2), pxB (n,2))}."""
    pairs = {}
    with open(path) as f:
        lines = f.readlines()
    idx = 0
    n_lines = len(lines)

    def fail(msg, lineno):
        raise ParseError(msg, line=lineno, path=path)

    header = None
    while idx < n_lines:
        line = lines[idx].strip()
        idx += 1
        if line and not line.startswith("#"):
            header = line.split()
            break
    if header is None:
        fail("missing header line", 1)
    if len(header) != 2 or header[0] != MATCHES_MAGIC:
        fail(f"expected '{MATCHES_MAGIC} {MATCHES_VERSION}' header", idx)
    if header[1] != str(MATCHES_VERSION):
        fail(f"unsupported matches version {header[1]}", idx)

    while idx < n_lines:
        line = lines[idx].strip()
        idx += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] != "PAIR" or len(parts) != 4:
            fail("expected 'PAIR <idA> <idB> <n>'", idx)
        try:
            a, b, n = int(parts[1]), int(parts[2]), int(parts[3])
        except ValueError as exc:
            fail(str(exc), idx)
        if a == b or n < 0:
            fail("PAIR needs two distinct ids and n >= 0", idx)
        rows = np.zeros((n, 4), dtype=np.float64)
        for r in range(n):
            if idx >= n_lines:
                fail(f"PAIR {a} {b} truncated: expected {n} match lines", idx)
            vals = lines[idx].split()
            idx += 1
            if len(vals) != 4:
                fail("expected 'xA yA xB yB'", idx)
            try:
                rows[r] = [float(v) for v in vals]
            except ValueError as exc:
                fail(str(exc), idx)
        key = (a, b) if a < b else (b, a)
        block = rows if a < b else rows[:, [2, 3, 0, 1]]
        if key in pairs:
            pairs[key] = np.vstack([pairs[key], block])
        else:
            pairs[key] = block
    return {k: (v[:, :2].copy(), v[:, 2:].copy()) for k, v in pairs.items()}


def parse_image_list(path, require_exists=True):
    """Read `<id> <path>` lines; relative paths resolve against the list file."""
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(maxsplit=1)
            if len(parts) != 2:
                raise ParseError("expected '<id> <path>'", line=lineno, path=path)
            try:
                image_id = int(parts[0])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from exc
            img_path = parts[1]
            if not os.path.isabs(img_path):
                img_path = os.path.join(base, img_path)
            if require_exists and not os.path.exists(img_path):
                raise MissingImage(f"image {image_id}: {img_path} does not exist")
            out[image_id] = img_path
    return out


class _KeypointRegistry:
    """Unifies keypoints by quantized pixel coordinates per image."""

    def __init__(self):
        self._index = {}
        self._coords = {}

    def lookup(self, image_id, xy):
        table = self._index.setdefault(image_id, {})
        coords = self._coords.setdefault(image_id, [])
        key = (round(xy[0] * _KEY_SCALE), round(xy[1] * _KEY_SCALE))
        j = table.get(key)
        if j is None:
            j = len(coords)
            table[key] = j
            coords.append((float(xy[0]), float(xy[1])))
        return j

    def coords(self, image_id):
        return np.asarray(self._coords.get(image_id, []), dtype=np.float64).reshape(-1, 2)


def _median_triangulation_angle(R, t, px_a, px_b, intr):
    """Median apex angle of midpoint-triangulated inlier correspondences."""
    qa = intr.normalize(px_a)
    qb = intr.normalize(px_b)
    c2 = -R.T @ t
    angles = []
    for i in range(qa.shape[0]):
        d1 = np.append(qa[i], 1.0)
        d1 /= np.linalg.norm(d1)
        d2 = R.T @ np.append(qb[i], 1.0)
        d2 /= np.linalg.norm(d2)
        try:
            X = ray_midpoint(np.zeros(3), d1, c2, d2)
        except Exception:
            continue
        ra, rb = X, X - c2
        if np.linalg.norm(ra) < 1e-12 or np.linalg.norm(rb) < 1e-12:
            continue
        angles.append(ray_angle(ra, rb))
    if not angles:
        return 0.0
    return float(np.median(angles))


def verify_pair(px_a, px_b, intr, rng, thresh_px=1.0, min_inliers=15):
    """Five-point RANSAC gate for one pair; None when the pair fails."""
    if px_a.shape[0] < max(5, min_inliers):
        return None
    try:
        R, t, mask = estimate_relative_pose(px_a, px_b, intr, rng, thresh_px=thresh_px)
    except (InsufficientCorrespondences, DegenerateConfiguration):
        return None
    if int(mask.sum()) < min_inliers:
        return None
    angle = _median_triangulation_angle(R, t, px_a[mask], px_b[mask], intr)
    return CameraPose(R, t), mask, angle


def ingest(matches_path, intrinsics_path, rng, thresh_px=1.0, min_inliers=15):
    """Load correspondences, verify each pair, and build the scene graph.

    Pairs that fail five-point verification (or keep fewer than
    min_inliers correspondences) contribute their keypoints but no edge.
    """
    intr = parse_intrinsics(intrinsics_path)
    raw = parse_matches(matches_path)
    graph = SceneGraph()
    registry = _KeypointRegistry()

    for (a, b), (px_a, px_b) in sorted(raw.items()):
        graph.add_node(a)
        graph.add_node(b)
        idx_a = np.array([registry.lookup(a, xy) for xy in px_a], dtype=np.int64)
        idx_b = np.array([registry.lookup(b, xy) for xy in px_b], dtype=np.int64)
        verdict = verify_pair(px_a, px_b, intr, rng,
                              thresh_px=thresh_px, min_inliers=min_inliers)
        if verdict is None:
            continue
        rel_pose, mask, angle = verdict
        graph.add_edge(a, b, PairMatches(
            idx_a=idx_a, idx_b=idx_b, inliers=mask,
            rel_pose=rel_pose, median_angle=angle,
        ))

    for image_id in graph.nodes:
        graph.set_keypoints(image_id, registry.coords(image_id))
    return graph, intr
