"""Vision-language guided image restoration."""

__version__ = "0.1.0"
