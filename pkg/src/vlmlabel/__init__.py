"""Few-shot perception-assisted labeling of multi-view keypoints and animal behavior."""

__version__ = "0.1.0"
