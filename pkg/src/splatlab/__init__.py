"""splatlab: differentiable Gaussian splatting and single-view training on synthetic scenes."""

__version__ = "0.1.0"
