"""Controllers and benchmarking harness for a redundant 7-DoF arm."""

__version__ = "0.1.0"
