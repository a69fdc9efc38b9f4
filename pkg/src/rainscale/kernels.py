"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``RAINSCALE_PURE=1`` to
force the numpy implementations. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels

_compiled = None
if not os.environ.get("RAINSCALE_PURE"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_active = _compiled if _compiled is not None else _pykernels
BACKEND = "compiled" if _compiled is not None else "python"


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("compiled")
    return names


def get_backend(name):
    """Return the kernel module called ``name`` ('python' or 'compiled')."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


conv_out_size = _pykernels.conv_out_size
im2col = _active.im2col
col2im = _active.col2im
label_reach = _active.label_reach
