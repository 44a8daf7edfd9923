"""Cluster-aware contrastive pretraining for homogeneous image collections.

Submodules: ``synthdata`` (synthetic datasets and file formats),
``augment``, ``model`` (encoder, backprop, Adam, checkpoints), ``loss``
(NT-Xent and its cluster-masked variant), ``clustering``, ``fnsim``
(false-negative rates), ``lineval`` and ``pipeline``.  Hot kernels live in
``kernels``, which prefers the compiled extension and falls back to numpy.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
