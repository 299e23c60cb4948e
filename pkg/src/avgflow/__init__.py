"""Learning averaged drifts of slow-fast diffusions with normalizing-flow pushforwards."""

__version__ = "0.1.0"
