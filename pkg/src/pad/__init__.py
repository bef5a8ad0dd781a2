"""Joint denoising of future frames and robot actions with a diffusion transformer."""

from .config import PRESETS, PadConfig, count_tokens, estimate_flops, preset
from .padnet import PadNet, build_model

__version__ = "0.1.0"

__all__ = ["PRESETS", "PadConfig", "PadNet", "build_model", "count_tokens", "estimate_flops", "preset", "__version__"]
