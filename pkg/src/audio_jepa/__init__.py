"""Joint-embedding predictive pretraining on mel-spectrogram patches."""

__version__ = "0.1.0"
