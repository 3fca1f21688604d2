"""WaveCorr portfolio policy network and training toolkit."""

__version__ = "0.1.0"
