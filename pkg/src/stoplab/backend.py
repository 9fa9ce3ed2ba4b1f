"""Kernel backend selection.

The hot numerical loops in ``_kernels`` are compiled with numba by default.
Setting the environment variable ``STOPLAB_JIT=0`` before import selects the
pure NumPy/Python fallback, which runs the very same source uncompiled.  The
flag is read once at import time; ``benchmarks/backend_bench.py`` compares
both paths by spawning itself under each setting.
"""

import os

_flag = os.environ.get("STOPLAB_JIT", "").strip().lower()
if _flag in ("0", "false", "off", "no"):
    JIT_ENABLED = False
elif _flag in ("1", "true", "on", "yes"):
    import numba  # noqa: F401  fail loudly if forced on without numba

    JIT_ENABLED = True
else:
    try:
        import numba  # noqa: F401

        JIT_ENABLED = True
    except ImportError:
        JIT_ENABLED = False


if JIT_ENABLED:
    from numba import njit

    def maybe_njit(func):
        return njit(cache=True, fastmath=False)(func)

else:

    def maybe_njit(func):
        return func


def backend_name() -> str:
    return "numba" if JIT_ENABLED else "numpy"
