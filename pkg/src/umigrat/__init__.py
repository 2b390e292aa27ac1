"""Universal meta-initialization and gradient-robust transfer attacks on toy encoders."""

__version__ = "0.1.0"
