"""Expert-consistency amalgamation of human decisions and observed outcomes."""

__version__ = "0.1.0"
