"""Neural probability-flow solver for mass-conserving PDEs.

Solves ``d/dt p_t = -div(f_t(x; mu_t) p_t)`` without temporal or spatial
discretization by parameterizing the probability flow as a neural map and
iteratively matching its velocity field to ``f_t`` evaluated at frozen
parameters.
"""

import ctypes
import os

__version__ = "0.1.0"


def _tune_allocator():
    """Keep glibc from returning large blocks to the OS between steps.

    Training churns through ~MB-sized numpy temporaries; with default
    thresholds glibc serves them with mmap/munmap and every step pays page
    faults (5-10x slowdown on the hot loop). Harmless no-op elsewhere.
    Set VELMATCH_NO_MALLOC_TUNING=1 to skip.
    """
    if os.environ.get("VELMATCH_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(1 << 30))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(1 << 30))  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()
