from . import presets, utils

__all__ = ["presets", "utils"]
