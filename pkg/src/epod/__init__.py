"""Localized POD surrogates for elliptic PDEs with random coefficients."""

__version__ = "0.1.0"
