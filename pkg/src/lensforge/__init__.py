"""lensforge: automatic design and simulation of compound spherical lens systems.

The package is organized around a small set of immutable value types
(:class:`~lensforge.lens.LensSystem`, :class:`~lensforge.lens.DesignSpec`,
:class:`~lensforge.lens.ParamVector`) and pure functions that act on them:

- ``lens``     lens/glass model, normalized parameter vectors, file formats
- ``raytrace`` sequential spherical ray tracing, ray aiming, paraxial analysis
- ``merit``    scalar design losses (spot RMS, lateral color, constraints)
- ``search``   fused annealing / selection / ADAM global design search
- ``isp``      sensor model and the forward/inverse ISP chain
- ``imaging``  ray-traced PSFs, patch-wise convolution, image degradation
- ``joint``    desk-scale joint refinement with adjoint gradients and
               catalog-glass quantization
"""

from lensforge.lens import (
    DesignSpec,
    Glass,
    GlassCatalog,
    LensSystem,
    ParamSchema,
    ParamVector,
    Surface,
    denormalize,
    normalize,
    refractive_index,
)

__version__ = "0.1.0"

__all__ = [
    "DesignSpec",
    "Glass",
    "GlassCatalog",
    "LensSystem",
    "ParamSchema",
    "ParamVector",
    "Surface",
    "denormalize",
    "normalize",
    "refractive_index",
    "__version__",
]
