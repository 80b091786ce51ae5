"""Run configuration: every threshold, weight, and budget in one place.

The JSON round trip is lossless and strict: unknown keys raise ConfigError
so stale config files fail loudly instead of silently using defaults.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .fields import HashGridConfig


@dataclass
class GridSpec:
    """Hash-grid dimensioning for one field."""

    levels: int = 8
    n_min: int = 16
    n_max: int = 2048
    features: int = 4
    table_size: int = 2 ** 19

    def to_hash_config(self, bound):
        return HashGridConfig(
            L=self.levels,
            n_min=self.n_min,
            n_max=self.n_max,
            F=self.features,
            T=self.table_size,
            bound=bound,
        )


_SDF_GRID = GridSpec()
_RAD_GRID = GridSpec(levels=16, features=2)


@dataclass
class RunConfig:
    # domain
    bound: float = 4.0
    mode: str = "inside"
    seed: int = 0
    dtype: str = "float32"

    # rendering / tracing
    beta: float = 0.01
    trace_eps: float = 0.002
    trace_steps: int = 20
    stamps: int = 64
    rays_per_batch: int = 128
    eikonal_uniform: int = 64

    # field dimensioning
    sdf_grid: GridSpec = field(default_factory=lambda: dataclasses.replace(_SDF_GRID))
    radiance_grid: GridSpec = field(default_factory=lambda: dataclasses.replace(_RAD_GRID))
    sdf_hidden: int = 64
    sdf_layers: int = 2
    radiance_hidden: int = 64
    radiance_layers: int = 3
    feature_dim: int = 256
    view_freqs: int = 4

    # learning rates
    lr_grid: float = 1e-2
    lr_head: float = 1e-3
    lr_pose: float = 1e-3
    # Adam keeps stepping ~lr even when a stage starts converged, so the
    # SDF uses a reduced rate everywhere past pretraining.
    refine_lr_scale: float = 0.1

    # loss weights
    alpha_reproj: float = 1.0
    alpha_eik: float = 0.1
    alpha_rgb: float = 1.0
    alpha_dc: float = 0.1
    beta_reproj: float = 1.0
    beta_rgb: float = 1.0

    # iteration budgets
    pretrain_steps: int = 2000
    pretrain_batch: int = 512
    k_init: int = 3000
    k_reg: int = 300
    k_tri: int = 300
    nba_one_frame: int = 100
    nba_local: int = 200
    nba_global: int = 500
    nba_global_every: int = 5
    plateau_rel: float = 1e-4
    plateau_window: int = 50

    # geometric thresholds
    pair_frac: float = 0.01       # point-pair gate, fraction of bound
    sdf_frac: float = 0.005       # SDF gate, fraction of bound
    delta_px: float = 4.0
    mask_px: float = 45.0
    min_pair_inliers: int = 15
    ransac_px_pair: float = 1.0
    ransac_px_pnp: float = 4.0

    # initial placement
    r_init: float = 3.0
    baseline_len: float = 0.5
    pretrain_radius: float = 1.5

    def __post_init__(self):
        if self.mode not in ("inside", "outside"):
            raise ConfigError(f"mode must be inside or outside, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.bound <= 0 or self.beta <= 0:
            raise ConfigError("bound and beta must be positive")

    @property
    def delta_pair(self):
        return self.pair_frac * self.bound

    @property
    def delta_sdf(self):
        return self.sdf_frac * self.bound

    def torch_dtype(self):
        import torch

        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in ("sdf_grid", "radiance_grid"):
                if not isinstance(value, dict):
                    raise ConfigError(f"{key} must be an object")
                grid_known = {f.name for f in dataclasses.fields(GridSpec)}
                bad = set(value) - grid_known
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                kwargs[key] = GridSpec(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, source):
        """Parse from a JSON string or a file path."""
        text = source
        if "\n" not in source and source.strip().endswith(".json"):
            with open(source) as f:
                text = f.read()
        elif not source.lstrip().startswith("{"):
            with open(source) as f:
                text = f.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid config JSON: {exc}") from exc
        return cls.from_dict(data)
