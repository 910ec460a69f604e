"""Personalized voice trigger toolkit: an MDTC keyword detector followed by
a speaker-verification stage, with training, streaming inference, and a
detection-cost evaluation harness."""

__version__ = "0.1.0"
