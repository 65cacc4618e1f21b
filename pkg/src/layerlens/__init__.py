"""layerlens: layerwise powder-bed image enhancement and surface metrology."""

__version__ = "0.1.0"

from . import (  # noqa: F401
    config,
    imgcore,
    metric,
    neural,
    phaseharmonic,
    pipeline,
    reconstruct,
    register,
    segment,
)
