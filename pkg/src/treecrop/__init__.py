"""Tree-crop plantation mapping on satellite image time series."""

__version__ = "0.1.0"
