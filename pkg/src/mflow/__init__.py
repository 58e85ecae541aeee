"""Fractal microchannel flows: geometry, CFD ground truth, and U-Net surrogates."""

__version__ = "0.1.0"
