"""Incremental structure-from-motion on neural signed-distance level sets."""

from .config import RunConfig
from .errors import LevelSfmError

__version__ = "0.1.0"

__all__ = ["LevelSfmError", "RunConfig", "__version__"]
