"""Multi-channel speech separation with time-domain networks and convolutional IPD kernels."""

__version__ = "0.1.0"
