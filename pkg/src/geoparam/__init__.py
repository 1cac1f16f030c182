"""Conditional 3D geomodel generation, PCA parameterization with a
convolutional post-processing network, a single-phase flow proxy, and
ensemble history matching."""

__version__ = "0.1.0"
