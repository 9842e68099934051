"""Kernel backend selection.

The packed XNOR-popcount convolution has two implementations: a compiled
extension (binsr._native) and a pure-numpy fallback (binsr._fallback). The
compiled one is picked when importable; set BINSR_FORCE_FALLBACK=1 to force
the numpy path (tests and the benchmark use this to compare both).
"""

import os

from . import _fallback

if os.environ.get("BINSR_FORCE_FALLBACK") == "1":
    _impl = _fallback
    BACKEND = "fallback"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]
        BACKEND = "native"
    except ImportError:
        _impl = _fallback
        BACKEND = "fallback"

xnor_conv_dots = _impl.xnor_conv_dots
