"""Per-user preference modulation for a small flow-matching diffusion transformer, in numpy."""

__version__ = "0.1.0"
