"""LiDAR-camera SLAM on an incrementally optimized isotropic Gaussian map."""

__version__ = "0.1.0"
