"""Small-scale diagonal state-space models with PTQ and QAT at low bit widths."""

__version__ = "0.1.0"
