"""Multi-modal self-supervised adversarial domain adaptation on synthetic video-like data."""

__version__ = "0.1.0"
