"""Kernel backend selection: numba-jitted hot loops with a pure-numpy fallback.

The rasterizer inner loop is the only runtime hotspot that benefits from JIT
compilation. Both implementations live in ``kernels`` and must produce
identical outputs; selection happens here:

  * ``CADPOSE_NUMBA=0`` (also ``off``/``false``/``no``) forces the numpy path,
  * otherwise numba is used whenever it imports cleanly.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from __future__ import annotations

import os

try:
    from numba import njit  # type: ignore

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only on broken installs
    njit = None  # type: ignore
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    """True when jitted kernels should be used (env flag wins over autodetect)."""
    flag = os.environ.get("CADPOSE_NUMBA", "").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return False
    return HAVE_NUMBA
