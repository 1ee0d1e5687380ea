"""Desk-scale point-cloud tokenizer and dual-objective point transformer.

The package trains, in two stages, (1) a discrete VAE that turns point-cloud
patches into codebook tokens and reconstructs the cloud through a folding
decoder, and (2) a single transformer that learns masked-token prediction
(bidirectional segment) and autoregressive token generation (causal segment)
jointly under one hybrid attention mask.  Downstream heads cover
classification, few-shot evaluation, and autoregressive generation.

The numerical core is a small reverse-mode autodiff runtime on numpy arrays
(`gpm.runtime`), so every gradient in the system is checkable against finite
differences.
"""

import os

# Cap BLAS worker threads before numpy is first imported anywhere in the
# package.  Best effort: has no effect if numpy is already loaded.
_threads = os.environ.get("GPM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"

__all__ = [
    "PointCloudTokenizer",
    "GeneralPointModel",
    "PointCloudClassifier",
    "__version__",
]

_ESTIMATORS = {"PointCloudTokenizer", "GeneralPointModel", "PointCloudClassifier"}


def __getattr__(name):
    # estimators pull in the full model stack; load them on first touch only
    if name in _ESTIMATORS:
        from gpm import estimators

        return getattr(estimators, name)
    raise AttributeError(f"module 'gpm' has no attribute '{name}'")
