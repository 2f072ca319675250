"""Kernel backend selection.

The compiled extension is used when importable; set ``TRAJORACLE_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("TRAJORACLE_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

topk_inner_product = _impl.topk_inner_product
topk_inner_product_batch = _impl.topk_inner_product_batch
_mann_whitney_auc = _impl.mann_whitney_auc
adamw_update = _impl.adamw_update


def mann_whitney_auc(scores, labels):
    import numpy as np

    return _mann_whitney_auc(
        np.ascontiguousarray(scores, dtype=np.float64),
        np.ascontiguousarray(labels, dtype=np.int_),
    )


def backends():
    """Mapping of available backend name -> module, for benchmarks and tests."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
