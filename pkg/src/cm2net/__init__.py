"""Continual cross-modal learning with accumulative mapping prompts,
on a from-scratch float64 autodiff engine."""

__version__ = "0.1.0"
