"""Economic complexity toolkit: metrics, HMM regularization, nestedness, plane motion and forecasting."""

__version__ = "0.1.0"
