"""Desk-scale multi-modal dataset distillation on a second-order autodiff core."""
__version__ = "0.1.0"
