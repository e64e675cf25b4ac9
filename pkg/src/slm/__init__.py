"""Adapter sandwich: a trainable transformer adapter between a frozen speech
encoder and a frozen encoder-decoder text LM, built on a small numpy autodiff
core."""

__version__ = "0.1.0"
