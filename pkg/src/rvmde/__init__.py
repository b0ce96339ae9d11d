"""Radar-validated monocular depth estimation."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
