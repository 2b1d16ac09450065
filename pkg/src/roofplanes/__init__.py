"""Roof plane instance segmentation from airborne point clouds.

Superpoint generation, handcrafted point features, traditional plane
completion and boundary refinement, instance metrics, dataset degradations
and a Fourier KAN kernel.
"""

__version__ = "0.1.0"

from .cloud_io import NOISE, PointCloud, load_cloud, load_labeling, save_labeling  # noqa: E402
from .config import RunConfig  # noqa: E402
from .postprocess import pipeline  # noqa: E402

__all__ = ["NOISE", "PointCloud", "RunConfig", "load_cloud", "load_labeling", "pipeline",
           "save_labeling", "__version__"]
