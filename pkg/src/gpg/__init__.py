"""Graph policy gradients for unlabeled multi-robot motion planning."""

__version__ = "0.1.0"
