"""Factor-graph navigation: constrained iterative least squares, lidar
localization on a distance field, and unicycle MPC."""

__version__ = "0.1.0"
