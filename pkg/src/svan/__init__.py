"""Symmetric Visual Attention Network (SVAN) for efficient single-image super-resolution."""

from .model import SvanConfig, SvanParams, init_params, load_params, save_params, svan_forward

__version__ = "0.1.0"

__all__ = ["SvanConfig", "SvanParams", "init_params", "load_params", "save_params", "svan_forward"]
