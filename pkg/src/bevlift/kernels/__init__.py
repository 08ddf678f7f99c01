"""Conv kernel backend selection.

The numpy backend (im2col + BLAS matmul) is the default: on typical BEV
shapes it benchmarks 10-25x faster single-threaded than the direct-loop
compiled kernels (see benchmarks/bench_kernels.py). The compiled extension
is kept as a BLAS-free alternative; set BEVLIFT_FORCE_BACKEND=cython (or
=numpy) to pin a backend explicitly.
"""

import os

from . import numpy_backend

_forced = os.environ.get("BEVLIFT_FORCE_BACKEND", "")

if _forced == "cython":
    from . import _conv_ext as _impl
elif _forced == "numpy":
    _impl = numpy_backend
else:
    _impl = numpy_backend
    if _forced:
        raise ValueError(f"unknown BEVLIFT_FORCE_BACKEND value: {_forced!r}")

BACKEND = _impl.BACKEND
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward


def compiled_available():
    """True when the compiled extension imports cleanly."""
    try:
        from . import _conv_ext  # noqa: F401
    except ImportError:
        return False
    return True
