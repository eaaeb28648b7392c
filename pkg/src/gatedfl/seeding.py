"""Stable per-purpose seeds derived from a base seed and string/int labels."""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *labels) -> int:
    h = hashlib.sha256(repr((int(base),) + tuple(labels)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") >> 1
