"""Gated multimodal transformer for sleep staging, built on a small numpy autodiff core."""

__version__ = "0.1.0"
