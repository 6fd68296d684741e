"""Backend selection for the convolution hot path.

The compiled extension is used when it imports; ``OTDECONV_BACKEND=numpy``
forces the pure-numpy kernels.  ``OTDECONV_THREADS`` caps BLAS threads
(default 1, which keeps results bitwise reproducible).
"""

import os

from . import _conv_numpy

try:
    from . import _conv_ext
except ImportError:  # not built
    _conv_ext = None

_forced = os.environ.get("OTDECONV_BACKEND", "").lower()
if _conv_ext is not None and _forced != "numpy":
    _impl = _conv_ext
else:
    _impl = _conv_numpy

BACKEND = _impl.BACKEND
correlate_padded = _impl.correlate_padded
correlate_weight_grad = _impl.correlate_weight_grad


def available_backends():
    return {"numpy": _conv_numpy, **({"cython": _conv_ext} if _conv_ext is not None else {})}


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("OTDECONV_THREADS", "1")))
    except ValueError:
        return 1


def limit_threads():
    """Context manager capping native thread pools at ``OTDECONV_THREADS``."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=thread_count())
