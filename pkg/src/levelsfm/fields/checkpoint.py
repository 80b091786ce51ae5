"""Versioned binary checkpoint for the field networks.

Layout (all little-endian): magic, version, the two grid configs and head
shapes, then raw float32 parameter blocks in declaration order, then an
optional Adam block (step counter plus first/second moments per parameter).
Writers are byte-deterministic: no timestamps, fixed field order.
"""

import struct

import numpy as np
import torch

from ..errors import ParseError
from .hashgrid import HashGridConfig
from .networks import RadianceField, SdfField

_MAGIC = b"LSFMCKPT"
_VERSION = 1


def _pack_grid(cfg: HashGridConfig) -> bytes:
    return struct.pack("<5Qd", cfg.L, cfg.n_min, cfg.n_max, cfg.F, cfg.T, cfg.bound)


def _unpack_grid(buf, off):
    L, n_min, n_max, F, T, bound = struct.unpack_from("<5Qd", buf, off)
    return HashGridConfig(L, n_min, n_max, F, T, bound), off + struct.calcsize("<5Qd")


def _write_block(fh, tensor):
    arr = tensor.detach().cpu().to(torch.float32).numpy().ravel()
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.astype("<f4").tobytes())


def _read_block(buf, off):
    (numel,) = struct.unpack_from("<Q", buf, off)
    off += 8
    arr = np.frombuffer(buf, dtype="<f4", count=numel, offset=off)
    return arr, off + 4 * numel


def save_checkpoint(path, sdf: SdfField, radiance: RadianceField, adam=None):
    """Serialize both fields (and optionally Adam moments for them)."""
    params = list(sdf.parameters()) + list(radiance.parameters())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(_pack_grid(sdf.encoding.cfg))
        hidden_s = sdf.layers[0].out_features
        fh.write(struct.pack("<3Q", sdf.z_dim, hidden_s, len(sdf.layers) - 1))
        fh.write(_pack_grid(radiance.encoding.cfg))
        hidden_r = radiance.layers[0].out_features
        z_dim_r = radiance.layers[0].in_features - (
            radiance.encoding.out_dim + 3 + 6 * radiance.n_freqs
        )
        fh.write(struct.pack("<4Q", z_dim_r, radiance.n_freqs, hidden_r, len(radiance.layers) - 1))
        fh.write(struct.pack("<Q", len(params)))
        for p in params:
            _write_block(fh, p)
        if adam is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            state = adam if isinstance(adam, dict) else adam.state_dict()
            fh.write(struct.pack("<Q", state["step"]))
            flat_m = [t for k in sorted(state["m"]) for t in state["m"][k]]
            flat_v = [t for k in sorted(state["v"]) for t in state["v"][k]]
            fh.write(struct.pack("<Q", len(flat_m)))
            for t in flat_m:
                _write_block(fh, t)
            for t in flat_v:
                _write_block(fh, t)


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild both fields from a checkpoint.

    Returns (sdf, radiance, adam_blocks) where adam_blocks is None or a dict
    with 'step', 'm', 'v' as flat tensor lists in save order.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ParseError("not a field checkpoint", path=str(path))
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path=str(path))
    off = 12
    sdf_grid, off = _unpack_grid(buf, off)
    z_dim, hidden_s, n_hidden_s = struct.unpack_from("<3Q", buf, off)
    off += struct.calcsize("<3Q")
    rad_grid, off = _unpack_grid(buf, off)
    z_dim_r, n_freqs, hidden_r, n_hidden_r = struct.unpack_from("<4Q", buf, off)
    off += struct.calcsize("<4Q")
    sdf = SdfField(sdf_grid, z_dim=z_dim, hidden=hidden_s, n_hidden=n_hidden_s, dtype=dtype)
    radiance = RadianceField(
        rad_grid, z_dim=z_dim_r, n_freqs=n_freqs, hidden=hidden_r,
        n_hidden=n_hidden_r, dtype=dtype,
    )
    (n_params,) = struct.unpack_from("<Q", buf, off)
    off += 8
    params = list(sdf.parameters()) + list(radiance.parameters())
    if n_params != len(params):
        raise ParseError(
            f"checkpoint has {n_params} parameter blocks, model wants {len(params)}",
            path=str(path),
        )
    with torch.no_grad():
        for p in params:
            arr, off = _read_block(buf, off)
            if arr.size != p.numel():
                raise ParseError("parameter block size mismatch", path=str(path))
            p.copy_(torch.from_numpy(arr.copy()).to(dtype).view_as(p))
    (has_adam,) = struct.unpack_from("<B", buf, off)
    off += 1
    adam = None
    if has_adam:
        (step,) = struct.unpack_from("<Q", buf, off)
        off += 8
        (n_blocks,) = struct.unpack_from("<Q", buf, off)
        off += 8
        ms, vs = [], []
        for _ in range(n_blocks):
            arr, off = _read_block(buf, off)
            ms.append(torch.from_numpy(arr.copy()).to(dtype))
        for _ in range(n_blocks):
            arr, off = _read_block(buf, off)
            vs.append(torch.from_numpy(arr.copy()).to(dtype))
        adam = {"step": step, "m": ms, "v": vs}
    return sdf, radiance, adam
