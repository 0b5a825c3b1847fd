"""Selects the compiled blending kernel, falling back to numpy."""
import logging
import os

log = logging.getLogger(__name__)

_FORCE_PY = os.environ.get("SPLATCAMS_PURE_PYTHON", "") not in ("", "0")

if _FORCE_PY:
    from . import _kernel_py as kernel
else:
    try:
        from . import _kernel as kernel  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        log.warning("compiled rasterizer kernel not built; using the numpy fallback")
        from . import _kernel_py as kernel

from . import _kernel_py as python_kernel

BACKEND = "python" if kernel is python_kernel else "compiled"

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads
