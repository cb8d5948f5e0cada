"""Space-time 2D Gaussian surfel splatting toolkit."""

__version__ = "0.1.0"

from . import errors
from .cameras import Camera, look_at
from .core import (ActivatedSplat, Bounds, GaussianSet, Splat2D, activate,
                   eval_sh, intersect_alpha)
