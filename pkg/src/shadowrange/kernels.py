"""Kernel selection.

The compiled extension is used when it imports; otherwise the pure-Python
versions are used. Set ``SHADOWRANGE_PURE_KERNELS=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _purekernels

BACKEND = "pure"
keystream_xor = _purekernels.keystream_xor
fnv1a32 = _purekernels.fnv1a32

if os.environ.get("SHADOWRANGE_PURE_KERNELS", "") not in ("1", "true", "yes"):
    try:
        from . import _speedups
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "compiled"
        keystream_xor = _speedups.keystream_xor
        fnv1a32 = _speedups.fnv1a32

__all__ = ["BACKEND", "keystream_xor", "fnv1a32"]
