"""Kernel backend selection, fixed once at import time.

Two interchangeable implementations exist: ``leo._ckernels`` (compiled) and
``leo._kernels_np`` (plain numpy). The ``LEO_BACKEND`` environment variable
picks one:

* ``auto`` (default): compiled if the extension is importable, else numpy.
* ``compiled``: require the extension, raise if it is missing.
* ``python``: always numpy, even when the extension is available.

``NAME`` reports which implementation won. The two backends agree to float
rounding, not bitwise, so anything promising byte-level reproducibility holds
only within a single backend.
"""

import os

from . import _kernels_np

_requested = os.environ.get("LEO_BACKEND", "auto").strip().lower() or "auto"
if _requested not in ("auto", "compiled", "python"):
    raise ImportError(
        "LEO_BACKEND must be one of auto, compiled, python; got %r" % (_requested,)
    )

if _requested == "python":
    _impl = _kernels_np
    NAME = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        NAME = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "LEO_BACKEND=compiled but the leo._ckernels extension is not built"
            )
        _impl = _kernels_np
        NAME = "python"

add = _impl.add
sub = _impl.sub
mul = _impl.mul
div = _impl.div
neg = _impl.neg
exp = _impl.exp
log = _impl.log
relu = _impl.relu
square = _impl.square
sqrt = _impl.sqrt
matmul = _impl.matmul
transpose = _impl.transpose
reduce_sum = _impl.reduce_sum
broadcast_to = _impl.broadcast_to
