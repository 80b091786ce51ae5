"""Multi-resolution hash-grid feature encoding."""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    """Geometry of one multi-resolution feature grid.

    L levels span per-axis resolutions n_min..n_max geometrically; each
    level owns a table of up to T feature rows of width F.  The encoding
    domain is the cube [-bound, bound]^3.
    """

    L: int = 8
    n_min: int = 16
    n_max: int = 2048
    F: int = 4
    T: int = 2**19
    bound: float = 4.0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("level count must be >= 1")
        if not (1 <= self.n_min <= self.n_max):
            raise ValueError("need 1 <= n_min <= n_max")
        if self.T < 1 or (self.T & (self.T - 1)) != 0:
            raise ValueError("table size must be a power of two")
        if self.bound <= 0:
            raise ValueError("bound must be positive")


def level_resolution(cfg: HashGridConfig, l: int) -> int:
    """Per-axis resolution of level l: floor(n_min * b^l) on a geometric ladder."""
    if not 0 <= l < cfg.L:
        raise ValueError(f"level {l} outside [0, {cfg.L})")
    if cfg.L == 1:
        return cfg.n_min
    b = math.exp((math.log(cfg.n_max) - math.log(cfg.n_min)) / (cfg.L - 1))
    return int(math.floor(cfg.n_min * b**l))


def spatial_hash(corners, T: int):
    """Hash integer corner coordinates into [0, T) with wrapping arithmetic.

    corners: (..., 3) integer array.  T must be a power of two.
    """
    c = np.asarray(corners, dtype=np.uint64)
    h = (
        c[..., 0] * np.uint64(_PRIMES[0])
        ^ c[..., 1] * np.uint64(_PRIMES[1])
        ^ c[..., 2] * np.uint64(_PRIMES[2])
    )
    return (h & np.uint64(T - 1)).astype(np.int64)


# Corner offsets of a voxel, binary order (z fastest bit last for clarity).
_CORNERS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64
)


class HashEncoding(nn.Module):
    """Trilinear multi-resolution feature lookup over learnable tables.

    Levels whose full vertex grid fits in T rows are indexed densely; finer
    levels fall back to the XOR-prime spatial hash.  Queries are clamped to
    the domain cube.  Output has L*F channels and is differentiable in x.
    """

    def __init__(self, cfg: HashGridConfig, generator=None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.resolutions = [level_resolution(cfg, l) for l in range(cfg.L)]
        tables = []
        for n in self.resolutions:
            rows = min((n + 1) ** 3, cfg.T)
            w = torch.empty(rows, cfg.F, dtype=dtype)
            w.uniform_(-1e-4, 1e-4, generator=generator)
            tables.append(nn.Parameter(w))
        self.tables = nn.ParameterList(tables)

    @property
    def out_dim(self) -> int:
        return self.cfg.L * self.cfg.F

    def _corner_index(self, corner, n, rows):
        if rows == (n + 1) ** 3:
            stride = n + 1
            return corner[..., 0] + stride * (corner[..., 1] + stride * corner[..., 2])
        h = (
            corner[..., 0] * _PRIMES[0]
            ^ corner[..., 1] * _PRIMES[1]
            ^ corner[..., 2] * _PRIMES[2]
        )
        return h & (self.cfg.T - 1)

    def forward(self, x):
        """x: (B, 3) world coordinates -> (B, L*F) features."""
        bound = self.cfg.bound
        u = (x.clamp(-bound, bound) + bound) / (2.0 * bound)
        corners = _CORNERS.to(x.device)
        feats = []
        for n, table in zip(self.resolutions, self.tables):
            s = u * n
            i0 = s.detach().floor().long().clamp_(0, n - 1)
            w = s - i0  # in [0,1]; carries the gradient w.r.t. x
            corner = i0.unsqueeze(1) + corners.unsqueeze(0)  # (B, 8, 3)
            idx = self._corner_index(corner, n, table.shape[0])
            f = table[idx]  # (B, 8, F)
            cw = torch.where(corners.unsqueeze(0).bool(), w.unsqueeze(1), 1.0 - w.unsqueeze(1))
            weight = cw.prod(dim=-1)  # (B, 8)
            feats.append((f * weight.unsqueeze(-1)).sum(dim=1))
        return torch.cat(feats, dim=-1)
