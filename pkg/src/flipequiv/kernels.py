"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise (or when
``FLIPEQUIV_BACKEND=python``) the numpy implementation is used.  Both
expose ``im2col``, ``col2im``, ``maxpool_forward`` and ``maxpool_backward``.
"""
import logging
import os

from flipequiv import _pykernels

log = logging.getLogger(__name__)

BACKENDS = {"python": _pykernels}
try:
    from flipequiv import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels


def _select():
    wanted = os.environ.get("FLIPEQUIV_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            log.warning("backend %r unavailable, falling back to numpy", wanted)
            return "python"
        return wanted
    return "cython" if "cython" in BACKENDS else "python"


BACKEND = _select()
_impl = BACKENDS[BACKEND]

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
