"""Hot kernel backend, chosen once at import.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy versions in :mod:`.fallback` are used.  Setting ``LESIONSEG_PURE=1``
forces the fallback.
"""
import os

from . import fallback

BACKEND = "python"
_impl = fallback

if os.environ.get("LESIONSEG_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = fallback

im2row = _impl.im2row
row2im = _impl.row2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward

__all__ = ["BACKEND", "fallback", "im2row", "row2im", "maxpool2_forward", "maxpool2_backward"]
