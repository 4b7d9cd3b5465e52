"""Audio-text alignment scoring with a small causal language model."""

__version__ = "0.1.0"
