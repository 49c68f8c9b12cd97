"""LiDAR/camera box-prior segmentation toolkit at desk scale."""

__version__ = "0.1.0"
