"""Masked vision-transformer pipeline on synthetic data.

Importing this package before numpy pins BLAS to one thread: every matrix
in the desk-scale models is small enough that thread dispatch costs more
than it saves, and single-threaded kernels keep runs bit-reproducible.
"""

import os as _os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import checkpoint, config, data, mgn, optim, relabel, tensor, train, vit  # noqa: E402,F401
from .tensor import Tape, Tensor, backward  # noqa: E402,F401

__version__ = "0.1.0"
