"""Point-distribution set abstraction for point clouds, on a small numpy autodiff kernel."""

__version__ = "0.1.0"
