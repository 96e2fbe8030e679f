"""frustumbox: automatic 3D box annotation from 2D boxes and LiDAR frustums."""

import os

# Reproducibility contract: identical inputs and seeds give bit-identical
# results, and permuting a batch permutes outputs bit-exactly. Multithreaded
# BLAS can split reductions differently depending on system load, which
# silently breaks both guarantees, so the pools this process uses are pinned
# to one thread. Desk-scale matrices gain essentially nothing from more.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _BLAS_SINGLE_THREAD = _threadpool_limits(limits=1, user_api="blas")
except ImportError:  # pragma: no cover - environment without threadpoolctl
    _BLAS_SINGLE_THREAD = None

__version__ = "0.1.0"
