"""Zero-level-set mesh extraction and mesh sampling utilities."""

import numpy as np
import torch

_CHUNK = 65536


def _grid_values(sdf_fn, resolution, bound, dtype=torch.float32):
    axis = np.linspace(-bound, bound, resolution)
    xs, ys, zs = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
    vals = np.empty(len(pts))
    with torch.no_grad():
        for s in range(0, len(pts), _CHUNK):
            chunk = torch.as_tensor(pts[s:s + _CHUNK], dtype=dtype)
            vals[s:s + _CHUNK] = sdf_fn(chunk).double().numpy()
    return vals.reshape(resolution, resolution, resolution), axis


def marching_cubes(sdf_fn, resolution, iso_level=0.0, bound=4.0):
    """Triangle mesh of the {sdf = iso_level} surface inside the bound cube.

    sdf_fn maps (N,3) torch points to (N,) values.  Vertices are linearly
    interpolated on sign-change edges; faces are wound so their normals
    point along increasing sdf (outward).  An empty mesh (no level
    crossing in the cube) returns zero-size arrays rather than failing.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8 per axis, got {resolution}")
    from skimage import measure

    vol, axis = _grid_values(sdf_fn, resolution, bound)
    if not (vol.min() < iso_level < vol.max()):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    spacing = float(axis[1] - axis[0])
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=iso_level, spacing=(spacing,) * 3,
        gradient_direction="ascent",
    )
    verts = verts + axis[0]
    faces = faces.astype(np.int64)

    # Audit the winding against the field gradient and flip renegade faces.
    centroids = verts[faces].mean(axis=1)
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    normals = np.cross(e1, e2)
    h = 0.5 * spacing
    grad = np.zeros_like(centroids)
    with torch.no_grad():
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            dp = sdf_fn(torch.as_tensor(centroids + e, dtype=torch.float32))
            dm = sdf_fn(torch.as_tensor(centroids - e, dtype=torch.float32))
            grad[:, a] = (dp - dm).double().numpy() / (2 * h)
    wrong = (normals * grad).sum(axis=1) < 0
    faces[wrong] = faces[wrong][:, ::-1]
    return verts, faces


def sample_mesh(verts, faces, n, rng):
    """Uniform area-weighted surface samples; (n,3), empty mesh -> (0,3)."""
    if len(faces) == 0 or n == 0:
        return np.zeros((0, 3))
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    idx = rng.choice(len(faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[idx]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


_MESH_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
element face {nf}
property list uchar int vertex_indices
end_header
"""


def write_mesh_ply(path, verts, faces):
    """Binary little-endian PLY with vertex and triangle elements."""
    verts = np.asarray(verts, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_MESH_HEADER.format(nv=len(verts), nf=len(faces)).encode("ascii"))
        fh.write(verts.tobytes())
        if len(faces):
            rec = np.zeros(
                len(faces),
                dtype=[("n", "u1"), ("a", "<i4"), ("b", "<i4"), ("c", "<i4")],
            )
            rec["n"] = 3
            rec["a"], rec["b"], rec["c"] = faces[:, 0], faces[:, 1], faces[:, 2]
            fh.write(rec.tobytes())
    return path


def read_mesh_ply(path):
    """Read back a write_mesh_ply file: (verts float64, faces int64)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    body = data[end + len(b"end_header\n"):]
    verts = np.frombuffer(body, dtype="<f4", count=3 * nv).reshape(nv, 3)
    rec = np.frombuffer(
        body[12 * nv:],
        dtype=[("n", "u1"), ("a", "<i4"), ("b", "<i4"), ("c", "<i4")],
        count=nf,
    )
    faces = np.stack([rec["a"], rec["b"], rec["c"]], axis=1).astype(np.int64)
    return verts.astype(np.float64), faces
