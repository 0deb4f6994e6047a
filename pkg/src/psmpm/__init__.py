"""2D Material Point Method on triangular grids with hat and C1 spline bases."""

__all__ = ["basis", "benchmarks", "cli_io", "mesh", "mpm_core"]
__version__ = "0.1.0"
