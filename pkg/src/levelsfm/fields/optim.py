"""Optimization state: grouped Adam with freezing, pose tangent variables."""

import torch
from torch import nn

from ..errors import NonFiniteGradient


class AdamOptimizer:
    """Adam with named parameter groups that can be frozen per stage.

    The update is all-or-nothing: if any gradient in any active group is
    non-finite the whole step is rejected and NonFiniteGradient raised, so
    a bad batch can never corrupt the moment buffers.
    """

    def __init__(self, groups, lrs, betas=(0.9, 0.999), eps=1e-8):
        """groups: {name: [tensors]}; lrs: {name: learning rate}."""
        self.groups = {k: list(v) for k, v in groups.items()}
        self.lrs = dict(lrs)
        missing = set(self.groups) - set(self.lrs)
        if missing:
            raise ValueError(f"groups without a learning rate: {sorted(missing)}")
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.frozen = set()
        self.m = {k: [torch.zeros_like(p) for p in ps] for k, ps in self.groups.items()}
        self.v = {k: [torch.zeros_like(p) for p in ps] for k, ps in self.groups.items()}

    def freeze(self, name):
        if name not in self.groups:
            raise KeyError(name)
        self.frozen.add(name)

    def unfreeze(self, name):
        self.frozen.discard(name)

    def active_params(self):
        for name, ps in self.groups.items():
            if name not in self.frozen:
                yield from ps

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                if p.grad is not None:
                    p.grad.detach_()
                    p.grad.zero_()

    @torch.no_grad()
    def step(self):
        """Apply one Adam update to all unfrozen groups."""
        for name, ps in self.groups.items():
            if name in self.frozen:
                continue
            for p in ps:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradient(f"non-finite gradient in group '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, ps in self.groups.items():
            if name in self.frozen:
                continue
            lr = self.lrs[name]
            for p, m, v in zip(ps, self.m[name], self.v[name]):
                g = p.grad
                if g is None:
                    continue
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-lr)

    def state_dict(self):
        return {
            "step": self.step_count,
            "m": {k: [t.clone() for t in v] for k, v in self.m.items()},
            "v": {k: [t.clone() for t in v] for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.step_count = state["step"]
        for k in self.m:
            for dst, src in zip(self.m[k], state["m"][k]):
                dst.copy_(src)
            for dst, src in zip(self.v[k], state["v"][k]):
                dst.copy_(src)


def so3_hat(w):
    """(..., 3) -> (..., 3, 3) skew-symmetric matrices."""
    zero = torch.zeros_like(w[..., 0])
    rows = [
        torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
        torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
        torch.stack([-w[..., 1], w[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def so3_exp(w):
    """Rodrigues exponential, NaN-safe under autograd at the identity.

    The angle is read from a clamped square so sqrt never differentiates
    at zero; below the clamp the Taylor branch carries the gradient.
    """
    theta2 = (w * w).sum(dim=-1)
    theta = torch.sqrt(theta2.clamp_min(1e-16))
    small = theta2 < 1e-12
    A = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    B = torch.where(
        small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2.clamp_min(1e-16)
    )
    K = so3_hat(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(K.shape)
    return eye + A[..., None, None] * K + B[..., None, None] * (K @ K)


class PoseVariable(nn.Module):
    """World-to-camera pose optimized through a persistent tangent delta.

    R = exp(dw) R0 and t = t0 + dt, so the rotation stays orthonormal for
    any tangent value.  retract() folds the delta into the base pose.
    """

    def __init__(self, R0, t0, dtype=torch.float32):
        super().__init__()
        self.register_buffer("R0", torch.as_tensor(R0, dtype=dtype).clone())
        self.register_buffer("t0", torch.as_tensor(t0, dtype=dtype).reshape(3).clone())
        self.delta = nn.Parameter(torch.zeros(6, dtype=dtype))

    def rotation(self):
        return so3_exp(self.delta[:3]) @ self.R0

    def translation(self):
        return self.t0 + self.delta[3:]

    def matrices(self):
        return self.rotation(), self.translation()

    @torch.no_grad()
    def retract(self):
        """Fold the tangent delta into the base; delta returns to zero."""
        self.R0.copy_(so3_exp(self.delta[:3]) @ self.R0)
        self.t0.add_(self.delta[3:])
        self.delta.zero_()

    @torch.no_grad()
    def set_pose(self, R, t):
        self.R0.copy_(torch.as_tensor(R, dtype=self.R0.dtype))
        self.t0.copy_(torch.as_tensor(t, dtype=self.t0.dtype).reshape(3))
        self.delta.zero_()

    def numpy_pose(self):
        from ..geometry import CameraPose
        from ..geometry.rotations import project_to_rotation

        with torch.no_grad():
            R = self.rotation().double().cpu().numpy()
            t = self.translation().double().cpu().numpy()
        return CameraPose(project_to_rotation(R), t)
