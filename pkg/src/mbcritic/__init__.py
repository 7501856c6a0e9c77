"""Model-based bi-level meta-learning of critics for policy gradients."""

__version__ = "0.1.0"
