"""Human-object interaction detection with split subject/object/verb decoders,
label-prior denoising training and an optional vision-language advisor."""

from .config import RunConfig, load_config
from .geometry import Box
from .structures import HOIInstance

__version__ = "0.1.0"
__all__ = ["Box", "HOIInstance", "RunConfig", "load_config", "__version__"]
