"""Few-shot video action recognition with adaptive sampling and alignment."""

__version__ = "0.1.0"

from .config import RunConfig, apply_overrides, load_config, save_config  # noqa: F401
