"""Kernel backend selection.

The compiled Cython extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``HDTEACHER_KERNELS=python`` to force the fallback
(``compiled`` makes a missing extension an import error).
"""

import os

_choice = os.environ.get("HDTEACHER_KERNELS", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ImportError(f"HDTEACHER_KERNELS must be auto, compiled or python, got {_choice!r}")

if _choice == "python":
    from . import _fallback as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        from . import _fallback as _impl
        BACKEND = "python"

conv_forward = _impl.conv_forward
conv_backward_input = _impl.conv_backward_input
conv_backward_weight = _impl.conv_backward_weight
edt_lines = _impl.edt_lines


def load_backend(name):
    """Return the kernel module for ``name`` ('compiled' or 'python')."""
    if name == "python":
        from . import _fallback
        return _fallback
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
