"""EV charging load forecasting benchmark.

Session records go in, a grid of MAE/RMSE scores over forecast horizons and
aggregation levels comes out. See ``evforecast.cli`` for the staged pipeline.
"""

__version__ = "0.1.0"
