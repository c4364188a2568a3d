"""Image classification fused with predicted brain activity, on numpy."""
__version__ = "0.1.0"
