"""Joint contrastive + captioning vision-language model at desk scale.

A single vision encoder and a single text decoder trained with a two-pass
scheme: one bidirectional pass without cross-attention for contrastive
embeddings, one causal pass with cross-attention for caption generation.
All decoder weights are shared between the passes.
"""

import os
import sys

# MAMMUT_THREADS caps kernel parallelism (BLAS threads inside matmul).
# 0 means off (single-threaded kernels), the deterministic test default.
# Must take effect before numpy loads its BLAS backend, hence this runs
# at package import time and only if numpy is not yet imported.
_threads = os.environ.get("MAMMUT_THREADS")
if _threads is not None and "numpy" not in sys.modules:
    _n = max(1, int(_threads)) if _threads.strip() else 1
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, str(_n))
del _threads


def _tune_allocator() -> None:
    # every tape op allocates fresh buffers; above glibc's default mmap
    # threshold each one page-faults, which dominates small-model step time.
    # M_MMAP_THRESHOLD = -3, M_TRIM_THRESHOLD = -1 (glibc malloc.h).
    try:
        import ctypes

        libc = ctypes.CDLL(None)
        libc.mallopt(-3, 1 << 30)
        libc.mallopt(-1, 1 << 30)
    except (OSError, AttributeError):
        pass


_tune_allocator()

__version__ = "0.1.0"
