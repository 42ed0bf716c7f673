"""Joint channel pruning and mixed-precision search for small convnets."""

__version__ = "0.1.0"
