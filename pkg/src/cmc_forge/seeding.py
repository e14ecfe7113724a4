"""Derived random streams.

Every random decision in the package draws from a generator derived from
(integer seed, context keys) rather than from a shared sequential stream.
That makes per-view / per-step work order-independent: parallel and serial
execution consume identical streams, and resuming a run mid-way reproduces
the exact continuation.
"""

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.blake2s(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"unsupported seed key type: {type(key)!r}")


def rng_for(*keys) -> np.random.Generator:
    """Return a Generator for the given (seed, context...) key tuple.

    String keys are hashed stably, so streams tagged with different purpose
    strings are independent regardless of call order.
    """
    entropy = [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
