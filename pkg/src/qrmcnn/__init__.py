"""Option direction forecasting: quasi-reversibility minimizers + a small 1-D CNN."""

__version__ = "0.1.0"

TRADING_DAY = 1.0 / 252.0
