"""Incremental text-to-speech with pseudo-lookahead context and a distilled
context predictor, built on a small numpy autodiff-free core."""

__version__ = "0.1.0"
