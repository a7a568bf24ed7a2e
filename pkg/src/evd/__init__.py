"""Event-gated flow matching on synthetic latent videos."""

__version__ = "0.1.0"
