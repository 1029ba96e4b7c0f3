"""Most-confusing-instance search for VAE world models on a point maze."""

__version__ = "0.1.0"
