"""Volume rendering, sphere tracing, and ray utilities."""

from .rays import camera_rays, clip_to_cube, inside_bound
from .tracing import TraceResult, sphere_trace, trace_points
from .volume import RenderResult, density, eikonal_samples, render_rays, sample_stamps

__all__ = [
    "RenderResult",
    "TraceResult",
    "camera_rays",
    "clip_to_cube",
    "density",
    "eikonal_samples",
    "inside_bound",
    "render_rays",
    "sample_stamps",
    "sphere_trace",
    "trace_points",
]
