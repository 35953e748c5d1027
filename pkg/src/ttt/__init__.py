"""Time-to-transition signals from twin-bond greenium term structures."""

__version__ = "0.1.0"
