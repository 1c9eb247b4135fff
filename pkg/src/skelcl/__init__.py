"""Self-supervised contrastive learning for 3D skeleton sequences."""

__version__ = "0.1.0"
