"""m3enc: multigranular encoder pretraining and retrieval evaluation toolkit.

Submodules import numpy lazily relative to this package root so the CLI can
pin BLAS thread counts before any numerical code loads.
"""

__all__ = ["errors"]
__version__ = "0.1.0"

from . import errors  # noqa: E402  (dependency-free)
