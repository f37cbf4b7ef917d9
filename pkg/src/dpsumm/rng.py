"""Named deterministic random streams.

Every random draw in the toolkit comes from a Philox4x64 counter-based
generator keyed by a blake2b digest of string parts, so any draw is a pure
function of its labels (e.g. (seed, step, parameter name)) and independent
of program order. Golden vectors recorded from these streams are portable
across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts) -> int:
    """128-bit Philox key derived from the labels."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def generator(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))


def normal(shape, std: float, *parts) -> np.ndarray:
    """Gaussian draw with standard deviation `std` from the named stream."""
    return generator(*parts).standard_normal(shape) * std
