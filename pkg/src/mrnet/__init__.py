"""MRNet rock-image classifier: a numpy autodiff engine, the model zoo, training, metrics and data tools."""

__version__ = "0.1.0"
