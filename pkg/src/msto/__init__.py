"""Neural-field multiscale topology optimization in 2D."""

__version__ = "0.1.0"
