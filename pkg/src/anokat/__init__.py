"""anokat: area-preserving conjugacy constructions on the cylinder, sphere and disk,
with exact discrete optimal transport used to certify the convergence bounds."""

from anokat.surface import (
    SurfaceTag,
    SurfacePoint,
    DiscreteMeasure,
    project_pi,
    dist,
    sample_mu_y,
    sample_leb,
)

__version__ = "0.1.0"

__all__ = [
    "SurfaceTag",
    "SurfacePoint",
    "DiscreteMeasure",
    "project_pi",
    "dist",
    "sample_mu_y",
    "sample_leb",
    "__version__",
]
