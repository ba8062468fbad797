"""Small shared helpers: seed derivation and angle wrapping."""

from __future__ import annotations

import hashlib
import math


def derive_seed(root: int, *labels) -> int:
    """Deterministic 63-bit child seed from a root seed and a label path.

    Hash-based so that adding a new consumer never shifts the streams of
    existing ones (unlike drawing child seeds from a shared generator).
    """
    key = repr((int(root),) + tuple(str(x) for x in labels)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi
