"""coloc: collaborative object localization with uncertainty-aware graph
learning and model-based multi-robot fusion."""

__version__ = "0.1.0"
