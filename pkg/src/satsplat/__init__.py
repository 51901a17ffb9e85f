"""satsplat: sparse-view satellite surface reconstruction toolkit.

RPC camera geometry, plane-sweep height inference, confidence-aware feature
fusion, differentiable 2D Gaussian splat rendering, TSDF surface extraction,
and confidence-routed losses, orchestrated as a three-stage cascade.
"""

__version__ = "0.1.0"

from . import errors, kernels  # noqa: F401
