"""Few-shot adaptive duration-informed text-to-speech at desk scale."""

__version__ = "0.1.0"
