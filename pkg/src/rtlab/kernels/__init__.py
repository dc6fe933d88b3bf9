"""Hot kernels, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise the
numpy fallback is loaded. Set ``RTLAB_PURE_PYTHON=1`` to force the fallback.

The compiled loop beats numpy on small tiles but loses to BLAS once a tile
reaches about 16k multiply-adds (``nq * nk * d``), so larger tiles go to the
fallback even when the extension is present.
"""
import os

from . import _fallback

BACKEND = "python"
if os.environ.get("RTLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

# nq * nk * d above which numpy's BLAS path is faster (see benchmarks/)
COMPILED_MAX_WORK = 16384


def update_tile(q, k, v, bias, m, l, o):
    """Fold one key/value tile into the running ``(m, l, o)`` state in place."""
    if _impl is not _fallback and q.shape[0] * k.shape[0] * q.shape[-1] < COMPILED_MAX_WORK:
        return _impl.update_tile(q, k, v, bias, m, l, o)
    return _fallback.update_tile(q, k, v, bias, m, l, o)

__all__ = ["BACKEND", "update_tile"]
