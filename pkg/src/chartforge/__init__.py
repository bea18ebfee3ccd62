"""chartforge: batch pipeline and evaluation harness for chart
instruction-tuning data."""

__version__ = "0.1.0"
