"""Desk-scale weight-sharing NAS benchmarking kit.

Enumerable cell search spaces with a self-built ground-truth oracle,
shared-weight super-net training under configurable mappings and
protocols, path samplers, and rank-correlation metrics.
"""

from snbench.backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
