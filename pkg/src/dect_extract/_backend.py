"""Kernel selection: the compiled extension when it is importable, numpy otherwise.

Set ``DECT_EXTRACT_PURE=1`` to force the numpy kernels.
"""

import os

from dect_extract import _fallback

kernels = _fallback

if os.environ.get("DECT_EXTRACT_PURE", "") not in ("1", "true", "yes"):
    try:
        from dect_extract import _kernels as kernels  # noqa: F811
    except ImportError:
        kernels = _fallback


def use(name: str):
    """Switch kernels at runtime (``"cython"`` or ``"numpy"``); returns the previous name."""
    global kernels
    prev = kernels.NAME
    if name == "numpy":
        kernels = _fallback
    elif name == "cython":
        from dect_extract import _kernels

        kernels = _kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return prev


def available() -> list[str]:
    names = ["numpy"]
    try:
        from dect_extract import _kernels  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names
