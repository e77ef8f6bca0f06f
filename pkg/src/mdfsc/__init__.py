"""Multi-scale deep feature sparse coding for unsupervised image anomaly detection.

Submodules: ``ndnum`` (array kernels and autodiff tape), ``pipeline``
(images, patches, synthetic data), ``autoencoder``, ``features``,
``sparse`` (LARS-Lasso, dictionary learning), ``scoring``, ``metrics``
and ``cli``.
"""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
