"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
implementations take over.  Set ``SINDISTILL_KERNELS=python`` to force the
fallback.  Both backends give bit-identical results except
``softmax_xent``, which agrees to rounding.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SINDISTILL_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
deconv_scatter = _impl.deconv_scatter
deconv_gather = _impl.deconv_gather
kmeans_assign = _impl.kmeans_assign
adam_update = _impl.adam_update
softmax_xent = _impl.softmax_xent

__all__ = [
    "BACKEND",
    "im2col3x3",
    "col2im3x3",
    "maxpool2_forward",
    "maxpool2_backward",
    "deconv_scatter",
    "deconv_gather",
    "kmeans_assign",
    "adam_update",
    "softmax_xent",
]
