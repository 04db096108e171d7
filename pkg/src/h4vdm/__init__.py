"""Source device verification from H.264 GOP coding parameters."""

__version__ = "0.1.0"
