"""Jigsaw pretext-invariant self-supervised learning with patch-level
instance-group discrimination, on a small numpy autodiff engine."""

__version__ = "0.1.0"
