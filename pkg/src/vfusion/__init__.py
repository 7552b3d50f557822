"""Monocular RGBD performance capture: tracking, fusion and synthesis."""

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
