"""Length-controllable caption generation on a synthetic corpus."""

__version__ = "0.1.0"
