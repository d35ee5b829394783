"""Process-level performance settings."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TOP_PAD = -2


def tune_allocator(top_pad: int = 256 << 20) -> bool:
    """Ask glibc to keep freed heap memory instead of returning it to the OS.

    Gradient steps allocate and free several arrays of a few MB each; without
    padding every step pays for fresh page faults, roughly doubling its cost.
    Returns False (and does nothing) on non-glibc platforms.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        return bool(libc.mallopt(_M_TOP_PAD, ctypes.c_int(top_pad)))
    except (OSError, AttributeError):
        return False
