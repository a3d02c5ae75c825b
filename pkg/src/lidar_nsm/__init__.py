"""Neural sensor models for sim2real LiDAR BEV augmentation."""

__version__ = "0.1.0"
