"""Backend selection for the dense-layer kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is imported. Set ``DEIDKIT_BACKEND=python`` to force the
fallback (the benchmark and the backend-agreement tests do this).
"""
import os

from deidkit import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DEIDKIT_BACKEND", "").lower() != "python":
    try:
        from deidkit import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
adam_update = _impl.adam_update
all_finite = _impl.all_finite


def compiled_available():
    try:
        from deidkit import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
