"""Packing kernels, compiled when the extension is built.

Set ``REIMTS_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from reimts import _fallback

BACKEND = "python"
if os.environ.get("REIMTS_PURE_PYTHON") != "1":
    try:
        from reimts import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
else:
    _impl = _fallback

time_buckets = _impl.time_buckets
count_buckets = _impl.count_buckets
pack_slots = _impl.pack_slots

__all__ = ["BACKEND", "time_buckets", "count_buckets", "pack_slots"]
