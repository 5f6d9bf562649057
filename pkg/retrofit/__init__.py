"""retrofit - retrieve a deformable part-based source shape and fit it to a point cloud."""

__version__ = "0.1.0"

__all__ = ["__version__"]
