"""Kernel backend chosen at import.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``MODTUNE_KERNELS=python`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MODTUNE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
adam_dense = _impl.adam_dense
adam_sparse = _impl.adam_sparse
