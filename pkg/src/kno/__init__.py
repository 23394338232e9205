"""Koopman neural operator toolkit: spectral PDE data, the KNO model, training and experiments."""

__version__ = "0.1.0"
