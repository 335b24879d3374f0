"""Counter-based splittable random streams.

Every stochastic operation derives its generator from ``(seed, *path)`` where
the path names the consumer (a stage, a trial index, a domain index, ...).
Distinct paths map to independent Philox keys, so work units can run in any
order, or in parallel, and still produce identical output.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1

PathPart = int | str
StreamLabel = PathPart | tuple[PathPart, ...]


def derive_key(seed: int, *path: PathPart) -> tuple[int, int]:
    """Hash ``(seed, path)`` into a 128-bit Philox key."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", seed & _MASK64))
    for part in path:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        elif isinstance(part, (int, np.integer)):
            h.update(b"i")
            h.update(struct.pack("<q", int(part)))
        else:
            raise TypeError(f"stream path parts must be int or str, got {type(part)!r}")
    digest = h.digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    )


def stream(seed: int, *path: PathPart) -> np.random.Generator:
    """Independent generator for ``(seed, path)``; a pure function of its inputs."""
    key = np.array(derive_key(seed, *path), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *path: PathPart) -> int:
    """Stable 63-bit sub-seed for components that take a plain integer seed."""
    return derive_key(seed, *path)[0] >> 1


def as_path(label: StreamLabel) -> tuple[PathPart, ...]:
    """Normalize a stream label (scalar or tuple) into a path tuple."""
    if isinstance(label, tuple):
        return label
    return (label,)
