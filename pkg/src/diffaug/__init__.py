"""Differentiable search of augmentation policies with a RELAX gradient estimator."""

__version__ = "0.1.0"
