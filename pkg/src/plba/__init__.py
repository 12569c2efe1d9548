"""Point-line local bundle adjustment with pose-uncertainty analysis."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
