"""efedsim: deterministic simulator and analytics toolkit for trust-gated,
SVD-compressed model-parallel transformer inference."""

__version__ = "0.1.0"
