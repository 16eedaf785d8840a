"""Hot-kernel backend selection.

The compiled extension (kernels._native) is preferred when importable; the
numpy implementation (kernels._python) is the fallback. Set POSECAST_KERNELS
to "native" or "python" to force a backend; "native" raises if the extension
is missing instead of silently degrading.
"""

import os

from . import _python

_requested = os.environ.get("POSECAST_KERNELS", "auto").lower()
if _requested not in ("auto", "native", "python"):
    raise ValueError(f"POSECAST_KERNELS must be auto|native|python, got {_requested!r}")

_backend = _python
if _requested in ("auto", "native"):
    try:
        from . import _native as _backend  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise

BACKEND = _backend.NAME

matmul = _backend.matmul
linear_forward = _backend.linear_forward
leaky_relu = _backend.leaky_relu
leaky_relu_grad = _backend.leaky_relu_grad
adam_update = _backend.adam_update
