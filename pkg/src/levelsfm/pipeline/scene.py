"""Scene graph, feature tracks, point set, and overall reconstruction state."""

from dataclasses import dataclass, field

import numpy as np

ACTIVE = 1
OUTLIER = 0


@dataclass
class PairMatches:
    """Verified correspondences of one image pair, stored under (a, b), a < b.

    idx_a/idx_b index into the per-image keypoint registries; inliers is
    the pair-verification mask; rel_pose is the verified relative pose of
    b with respect to a (unit baseline).
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    inliers: np.ndarray
    rel_pose: object = None
    median_angle: float = 0.0

    @property
    def inlier_count(self):
        return int(self.inliers.sum())


class SceneGraph:
    """Images as nodes, verified overlapping pairs as edges."""

    def __init__(self):
        self.nodes = {}      # image id -> image path (or None)
        self.keypoints = {}  # image id -> (K, 2) float64 pixel coordinates
        self.edges = {}      # (a, b) with a < b -> PairMatches

    def add_node(self, image_id, path=None):
        if image_id not in self.nodes:
            self.nodes[image_id] = path
            self.keypoints.setdefault(image_id, np.zeros((0, 2)))
        elif path is not None:
            self.nodes[image_id] = path

    def set_keypoints(self, image_id, px):
        self.keypoints[image_id] = np.asarray(px, dtype=np.float64).reshape(-1, 2)

    def add_edge(self, a, b, pair: PairMatches):
        if a not in self.nodes or b not in self.nodes:
            raise KeyError(f"edge ({a}, {b}) references unknown image")
        if a > b:
            a, b = b, a
            pair = PairMatches(
                idx_a=pair.idx_b,
                idx_b=pair.idx_a,
                inliers=pair.inliers,
                rel_pose=None if pair.rel_pose is None else pair.rel_pose.inverse(),
                median_angle=pair.median_angle,
            )
        self.edges[(a, b)] = pair

    def has_edge(self, a, b):
        return (min(a, b), max(a, b)) in self.edges

    def matches(self, a, b):
        """Inlier keypoint-index pairs oriented as (a-side, b-side)."""
        key = (min(a, b), max(a, b))
        pair = self.edges[key]
        ia, ib = pair.idx_a[pair.inliers], pair.idx_b[pair.inliers]
        if a > b:
            ia, ib = ib, ia
        return ia, ib

    def neighbors(self, image_id):
        out = []
        for a, b in self.edges:
            if a == image_id:
                out.append(b)
            elif b == image_id:
                out.append(a)
        return sorted(out)


class TrackStore:
    """The (k, i, j) tuples tying point k to keypoint j of image i.

    Bijectivity is enforced on insert: an (i, j) observation belongs to at
    most one point, and a point holds at most one observation per image.
    """

    def __init__(self):
        self._obs_point = {}    # (i, j) -> k
        self._point_obs = {}    # k -> {i: j}

    def __len__(self):
        return len(self._obs_point)

    def add(self, k, i, j):
        if (i, j) in self._obs_point:
            raise ValueError(f"observation ({i}, {j}) already tracked")
        imgs = self._point_obs.setdefault(k, {})
        if i in imgs:
            raise ValueError(f"point {k} already observed in image {i}")
        imgs[i] = j
        self._obs_point[(i, j)] = k

    def point_of(self, i, j):
        return self._obs_point.get((i, j))

    def observations(self, k):
        """List of (image, keypoint) pairs of point k."""
        return sorted(self._point_obs.get(k, {}).items())

    def images_of(self, k):
        return sorted(self._point_obs.get(k, {}).keys())

    def n_observations(self, k):
        return len(self._point_obs.get(k, {}))

    def points_in_image(self, i):
        """Sorted (keypoint j, point k) pairs observed in image i."""
        out = []
        for (ii, j), k in self._obs_point.items():
            if ii == i:
                out.append((j, k))
        return sorted(out)

    def point_ids(self):
        return sorted(self._point_obs.keys())

    def drop_point(self, k):
        for i, j in self._point_obs.pop(k, {}).items():
            del self._obs_point[(i, j)]

    def merge(self, keep, drop):
        """Remap drop's observations onto keep; conflicting images stay keep's."""
        moved = []
        for i, j in list(self._point_obs.get(drop, {}).items()):
            del self._obs_point[(i, j)]
            if i not in self._point_obs.setdefault(keep, {}):
                self._point_obs[keep][i] = j
                self._obs_point[(i, j)] = keep
                moved.append((i, j))
        self._point_obs.pop(drop, None)
        return moved

    def audit_bijective(self):
        """Cross-check both indices; raises AssertionError on divergence."""
        seen = {}
        for k, imgs in self._point_obs.items():
            for i, j in imgs.items():
                assert self._obs_point.get((i, j)) == k
                assert (i, j) not in seen
                seen[(i, j)] = k
        assert len(seen) == len(self._obs_point)


class ScenePointSet:
    """Reconstructed 3D points with status and last audit values."""

    def __init__(self):
        self.xyz = np.zeros((0, 3), dtype=np.float64)
        self.status = np.zeros((0,), dtype=np.int64)
        self.last_sdf = np.zeros((0,), dtype=np.float64)
        self.mean_residual = np.zeros((0,), dtype=np.float64)

    def __len__(self):
        return self.xyz.shape[0]

    def add(self, X, sdf=0.0, residual=0.0):
        k = len(self)
        self.xyz = np.vstack([self.xyz, np.asarray(X, dtype=np.float64).reshape(1, 3)])
        self.status = np.append(self.status, ACTIVE)
        self.last_sdf = np.append(self.last_sdf, float(sdf))
        self.mean_residual = np.append(self.mean_residual, float(residual))
        return k

    def active_ids(self):
        return np.nonzero(self.status == ACTIVE)[0]

    def mark_outlier(self, k):
        self.status[k] = OUTLIER

    def set_coords(self, ids, coords):
        self.xyz[np.asarray(ids, dtype=np.int64)] = np.asarray(coords, dtype=np.float64)

    def record_audit(self, ids, sdf_vals, residuals):
        ids = np.asarray(ids, dtype=np.int64)
        self.last_sdf[ids] = np.asarray(sdf_vals, dtype=np.float64)
        self.mean_residual[ids] = np.asarray(residuals, dtype=np.float64)


@dataclass
class ReconstructionState:
    """Everything the incremental loop reads and writes."""

    intr: object
    graph: SceneGraph
    config: object
    sdf: object = None
    radiance: object = None
    tracks: TrackStore = field(default_factory=TrackStore)
    points: ScenePointSet = field(default_factory=ScenePointSet)
    poses: dict = field(default_factory=dict)          # image id -> CameraPose
    images: dict = field(default_factory=dict)         # image id -> (H,W,3) float array
    registered_order: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    progress: list = field(default_factory=list)

    def is_registered(self, image_id):
        return image_id in self.poses

    def register_pose(self, image_id, pose):
        fresh = image_id not in self.poses
        self.poses[image_id] = pose
        if fresh:
            self.registered_order.append(image_id)

    def keypoint_px(self, i, j):
        return self.graph.keypoints[i][j]

    def bump(self, name, by=1):
        self.counters[name] = self.counters.get(name, 0) + by

    def note(self, stage, **info):
        self.progress.append({"stage": stage, **info})
