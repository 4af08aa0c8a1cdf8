from .project import ALPHA_MIN, DILATION, project_gaussians
from .reference import render_brute_force
from .render import (
    DEPTH_EPS,
    MODES,
    TILE,
    CloudGradients,
    RenderOutput,
    StaleStateError,
    bin_tiles,
    rasterize,
    render,
    render_backward,
    render_tensor,
)
