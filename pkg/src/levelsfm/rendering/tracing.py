"""Sphere tracing against a learned or analytic SDF."""

from dataclasses import dataclass

import torch


@dataclass
class TraceResult:
    hit: torch.Tensor           # (B,) bool
    t_hat: torch.Tensor         # (B,) accumulated stamp t0 + sum of steps
    X: torch.Tensor             # (B, 3) o + t_hat * v
    steps: torch.Tensor         # (B,) march iterations used
    final_sdf: torch.Tensor     # (B,) SDF at the stop point
    inside_start: torch.Tensor  # (B,) bool, ray began in the negative region


def sphere_trace(o, v, t_near, t_far, sdf_fn, eps=0.002, n_max=20, n_polish=3):
    """March each ray by its SDF value until |sdf| < eps or the budget ends.

    Rays starting inside the surface step by |sdf| and flip to normal
    stepping once the sign changes, converging onto the crossing.  Rays
    leaving [t_near, t_far] are misses.  After the march, hit stamps get
    n_polish Newton corrections along the ray (finite-difference slope):
    the |sdf| stop test alone leaves grazing hits displaced along t by
    |sdf| / cos(incidence), far more than eps.  Runs detached.
    """
    with torch.no_grad():
        B = o.shape[0]
        t = t_near.clone()
        X = o + t.unsqueeze(-1) * v
        d = sdf_fn(X)
        inside_start = d < 0
        sign = torch.where(inside_start, -torch.ones_like(d), torch.ones_like(d))
        hit = d.abs() < eps
        active = ~hit
        steps = torch.zeros(B, dtype=torch.long, device=o.device)
        for _ in range(n_max):
            if not bool(active.any()):
                break
            idx = active.nonzero(as_tuple=True)[0]
            t[idx] = t[idx] + sign[idx] * d[idx]
            Xa = o[idx] + t[idx].unsqueeze(-1) * v[idx]
            da = sdf_fn(Xa)
            d[idx] = da
            steps[idx] += 1
            # Once an inside ray crosses the zero set it behaves normally.
            crossed = idx[(sign[idx] < 0) & (da >= 0)]
            sign[crossed] = 1.0
            out = (t[idx] > t_far[idx] + eps) | (t[idx] < t_near[idx] - eps)
            conv = da.abs() < eps
            hit[idx] |= conv & ~out
            # Non-converged rays run the full budget even past tFar; the
            # range mask below turns them into misses.
            active[idx] = ~conv
        hit &= (t >= t_near - eps) & (t <= t_far + eps)
        h = max(eps / 20.0, 1e-6)
        for _ in range(n_polish):
            idx = hit.nonzero(as_tuple=True)[0]
            if len(idx) == 0:
                break
            oa, va, ta = o[idx], v[idx], t[idx]
            slope = (
                sdf_fn(oa + (ta + h).unsqueeze(-1) * va)
                - sdf_fn(oa + (ta - h).unsqueeze(-1) * va)
            ) / (2.0 * h)
            sgn = torch.where(slope < 0, -1.0, 1.0)
            slope = sgn * slope.abs().clamp_min(1e-3)
            t_new = (ta - d[idx] / slope).clamp(t_near[idx], t_far[idx])
            d[idx] = sdf_fn(oa + t_new.unsqueeze(-1) * va)
            t[idx] = t_new
        X = o + t.unsqueeze(-1) * v
    return TraceResult(hit=hit, t_hat=t, X=X, steps=steps, final_sdf=d,
                       inside_start=inside_start)


def trace_points(o, v, t_near, t_far, sdf_field, eps=0.002, n_max=20,
                 unroll=False, min_slope=0.1):
    """Differentiable surface points from sphere tracing.

    The march itself runs detached; gradients enter through the implicit
    relation of the final step, t = t0 + sdf(X0)/(-grad sdf . v), whose
    linearization is exact on the zero set.  Setting unroll=True instead
    backpropagates through every march step.
    """
    if unroll:
        t = t_near.clone()
        d0 = sdf_field.sdf(o + t.unsqueeze(-1) * v)
        sign = torch.where(d0 < 0, -1.0, 1.0)
        for _ in range(n_max):
            X = o + t.unsqueeze(-1) * v
            d = sdf_field.sdf(X)
            stop = d.abs() < eps
            t = torch.where(stop, t, t + sign * d)
        res = sphere_trace(o, v, t_near, t_far, sdf_field.sdf, eps, n_max)
        X = o + t.unsqueeze(-1) * v
        return res, X, t

    res = sphere_trace(o, v, t_near, t_far, sdf_field.sdf, eps, n_max)
    t0 = res.t_hat.detach()
    X0 = o + t0.unsqueeze(-1) * v
    d = sdf_field.sdf(X0)
    g = sdf_field.gradient(X0, create_graph=torch.is_grad_enabled())
    denom = -(g * v).sum(dim=-1)
    # Grazing hits make the implicit slope tiny; clamp magnitude, keep sign.
    sgn = torch.where(denom < 0, -1.0, 1.0)
    denom = (sgn * denom.abs().clamp_min(min_slope)).detach()
    t = t0 + (d - d.detach()) / denom
    X = o + t.unsqueeze(-1) * v
    return res, X, t
