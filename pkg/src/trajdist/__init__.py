"""Dual-stream gradient-statistics distillation in low-rank gradient
subspaces, with a historical gradient-projection optimizer, exercised on a
synthetic taxonomy-shift benchmark."""

__version__ = "0.1.0"
