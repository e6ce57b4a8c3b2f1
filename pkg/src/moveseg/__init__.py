"""Unsupervised foreground segmentation by moving masked objects over
differentiably inpainted backgrounds, with a self-contained autodiff core."""

__version__ = "0.1.0"
