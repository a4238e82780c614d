"""Multiple-instance scene classification on log-mel spectrograms, in plain numpy."""

__version__ = "0.1.0"
