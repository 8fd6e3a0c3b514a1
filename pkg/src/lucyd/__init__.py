"""3D microscopy deconvolution with the LUCYD network and classic baselines."""

__version__ = "0.1.0"
