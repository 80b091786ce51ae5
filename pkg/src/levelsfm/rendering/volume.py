"""Volume rendering of an SDF/radiance pair: density, sampling, quadrature."""

from dataclasses import dataclass

import torch


def density(d, beta):
    """SDF-induced density (1/beta) * Psi_beta(-d), Psi the Laplace CDF.

    Monotone non-increasing in d; equals 0.5/beta on the zero set.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = d if isinstance(d, torch.Tensor) else torch.as_tensor(d, dtype=torch.float64)
    inv = 1.0 / beta
    # Both where-branches are differentiated, so each must stay finite for
    # every input; exp(-|d|/beta) <= 1 keeps the unused branch harmless.
    decay = 0.5 * torch.exp(-d.abs() * inv)
    return inv * torch.where(d >= 0, decay, 1.0 - decay)


def sample_stamps(o, v, t_near, t_far, sdf_fn, beta, m):
    """Quadrature stamps: uniform plus two density-guided refinement rounds.

    Each round scores intervals by interval length times the near-surface
    mass exp(-|d|/beta) at the endpoints and splits the top m//2.  With
    m < 4 there is no interior to refine and the uniform stamps return
    unchanged.  Runs detached; stamps are constants to the optimizer.
    """
    if m < 2:
        raise ValueError("need at least 2 stamps")
    with torch.no_grad():
        frac = torch.linspace(0.0, 1.0, m, dtype=o.dtype, device=o.device)
        t = t_near.unsqueeze(-1) + (t_far - t_near).unsqueeze(-1) * frac  # (B, m)
        if m < 4:
            return t
        for _ in range(2):
            x = o.unsqueeze(1) + t.unsqueeze(-1) * v.unsqueeze(1)
            d = sdf_fn(x.reshape(-1, 3)).reshape(t.shape)
            near = torch.exp(-d.abs() / beta)
            score = (t[:, 1:] - t[:, :-1]) * torch.maximum(near[:, :-1], near[:, 1:])
            _, idx = torch.topk(score, k=m // 2, dim=-1)
            mids = 0.5 * (torch.gather(t, 1, idx) + torch.gather(t, 1, idx + 1))
            t = torch.sort(torch.cat([t, mids], dim=-1), dim=-1).values
    return t


@dataclass
class RenderResult:
    color: torch.Tensor    # (B, 3)
    depth: torch.Tensor    # (B,)
    opacity: torch.Tensor  # (B,)
    stamps: torch.Tensor   # (B, S)
    points: torch.Tensor   # (B, S-1, 3) quadrature points (detachable)


def render_rays(o, v, t_near, t_far, sdf_field, radiance_field, beta, m=64, stamps=None):
    """Transmittance quadrature along rays.

    Weights tau_i = T_i (1 - exp(-sigma_i dt_i)) with T_i the transmittance
    accumulated over earlier intervals; color and depth are tau-weighted
    sums (depth uses the stamp values, i.e. the expected termination).
    Pass explicit stamps to keep the sample set fixed across evaluations.
    """
    if stamps is None:
        stamps = sample_stamps(o, v, t_near, t_far, sdf_field.sdf, beta, m)
    t_left = stamps[:, :-1]
    dt = stamps[:, 1:] - stamps[:, :-1]
    x = o.unsqueeze(1) + t_left.unsqueeze(-1) * v.unsqueeze(1)  # (B, S-1, 3)
    B, S, _ = x.shape
    flat = x.reshape(-1, 3)
    d, z = sdf_field.sdf_and_feature(flat)
    sigma = density(d, beta).reshape(B, S)
    alpha = 1.0 - torch.exp(-sigma * dt)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1] + 1e-10], dim=1), dim=1
    )
    tau = trans * alpha  # (B, S)
    normals = sdf_field.gradient(flat, create_graph=torch.is_grad_enabled())
    normals = normals / torch.linalg.norm(normals, dim=-1, keepdim=True).clamp_min(1e-8)
    vdir = v.unsqueeze(1).expand(B, S, 3).reshape(-1, 3)
    rgb = radiance_field(flat, normals, vdir, z).reshape(B, S, 3)
    color = (tau.unsqueeze(-1) * rgb).sum(dim=1)
    depth = (tau * t_left).sum(dim=1)
    # The cumprod stabilizer can push the sum a few 1e-9 past 1.
    opacity = tau.sum(dim=1).clamp(max=1.0)
    return RenderResult(color=color, depth=depth, opacity=opacity, stamps=stamps, points=x)


def eikonal_samples(visited, n_uniform, bound, generator=None, dtype=torch.float32):
    """Union of visited trace/quadrature points and uniform cube draws."""
    parts = [v.detach().reshape(-1, 3) for v in visited if v is not None and v.numel()]
    if n_uniform > 0:
        u = torch.rand(n_uniform, 3, generator=generator, dtype=dtype)
        parts.append((2.0 * u - 1.0) * bound)
    if not parts:
        return torch.empty(0, 3, dtype=dtype)
    return torch.cat(parts, dim=0)
