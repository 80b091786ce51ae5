"""Coordinate networks: signed-distance field and radiance field heads."""

import math

import torch
from torch import nn
from torch.nn import functional as F

from .hashgrid import HashEncoding, HashGridConfig


def _seeded_linear(in_dim, out_dim, generator, dtype):
    """Linear layer with fan-in uniform init drawn from an explicit generator."""
    layer = nn.Linear(in_dim, out_dim, dtype=dtype)
    bnd = 1.0 / math.sqrt(in_dim)
    with torch.no_grad():
        layer.weight.uniform_(-bnd, bnd, generator=generator)
        layer.bias.uniform_(-bnd, bnd, generator=generator)
    return layer


def frequency_encode(v, n_freqs=4):
    """Sinusoidal band encoding: [sin(2^k v), cos(2^k v)] for k < n_freqs."""
    out = []
    for k in range(n_freqs):
        s = (2.0**k) * v
        out.append(torch.sin(s))
        out.append(torch.cos(s))
    return torch.cat(out, dim=-1)


class SdfField(nn.Module):
    """phi(x) = (d(x), z(x)): signed distance plus a geometry feature.

    The head runs on the hash-grid features alone; softplus keeps the
    distance branch smooth enough for stable spatial gradients.
    """

    def __init__(
        self,
        grid: HashGridConfig,
        z_dim: int = 256,
        hidden: int = 64,
        n_hidden: int = 2,
        generator=None,
        dtype=torch.float32,
    ):
        super().__init__()
        self.z_dim = z_dim
        self.encoding = HashEncoding(grid, generator=generator, dtype=dtype)
        dims = [self.encoding.out_dim] + [hidden] * n_hidden + [1 + z_dim]
        self.layers = nn.ModuleList(
            _seeded_linear(a, b, generator, dtype) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x):
        h = self.encoding(x)
        for layer in self.layers[:-1]:
            h = F.softplus(layer(h), beta=100.0)
        return self.layers[-1](h)

    def sdf(self, x):
        return self.forward(x)[..., 0]

    def sdf_and_feature(self, x):
        out = self.forward(x)
        return out[..., 0], out[..., 1:]

    def gradient(self, x, create_graph=False):
        """Spatial gradient of the distance branch via reverse mode."""
        with torch.enable_grad():
            xg = x if x.requires_grad else x.detach().requires_grad_(True)
            d = self.forward(xg)[..., 0]
            (g,) = torch.autograd.grad(d.sum(), xg, create_graph=create_graph)
        return g


class RadianceField(nn.Module):
    """Color head over position features, normal, encoded view dir, and z."""

    def __init__(
        self,
        grid: HashGridConfig,
        z_dim: int = 256,
        n_freqs: int = 4,
        hidden: int = 64,
        n_hidden: int = 3,
        generator=None,
        dtype=torch.float32,
    ):
        super().__init__()
        self.n_freqs = n_freqs
        self.encoding = HashEncoding(grid, generator=generator, dtype=dtype)
        in_dim = self.encoding.out_dim + 3 + 6 * n_freqs + z_dim
        dims = [in_dim] + [hidden] * n_hidden + [3]
        self.layers = nn.ModuleList(
            _seeded_linear(a, b, generator, dtype) for a, b in zip(dims[:-1], dims[1:])
        )

    def forward(self, x, n, v, z):
        h = torch.cat([self.encoding(x), n, frequency_encode(v, self.n_freqs), z], dim=-1)
        for layer in self.layers[:-1]:
            h = F.softplus(layer(h), beta=100.0)
        return torch.sigmoid(self.layers[-1](h))
