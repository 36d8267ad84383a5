"""Multi-modal document encoder-decoder with layout-aware pre-training, in numpy."""

__version__ = "0.1.0"
