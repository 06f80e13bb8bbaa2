"""Keyed per-item uniforms.

Every random number that is attached to a content unit (reservoir keys,
mock labeler flips) is derived from ``(seed, content_id, stream)`` rather
than from a position in a random stream.  That makes samples independent
of input order and lets shards be processed separately and merged.

The mixer is the SplitMix64 finalizer.  A scalar (pure int) and a
vectorized (numpy uint64) implementation are provided and must agree
bit-for-bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)

# Named streams so that different consumers of the same (seed, id) pair
# never share a uniform.
STREAM_RESERVOIR = 0
STREAM_LABELER = 1
STREAM_SUBSAMPLE = 2


def id_hash(content_id: str) -> int:
    """64-bit digest of a content id."""
    digest = hashlib.blake2b(content_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def _seed_state(seed: int, stream: int) -> int:
    return mix64((seed & MASK64) + _GOLDEN * (stream + 1))


def hashed_uniform(seed: int, content_id: str, stream: int = STREAM_RESERVOIR) -> float:
    """Uniform in (0, 1] determined by ``(seed, content_id, stream)``.

    The top 53 bits of the mixed hash ``h`` map to ``(h + 1) / 2**53`` so
    zero is never returned and 1 is attainable.
    """
    h = mix64(id_hash(content_id) ^ _seed_state(seed, stream))
    return ((h >> 11) + 1) * _INV_2_53


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(_M1)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def hashed_uniforms(seeds, id_hashes, stream: int = STREAM_RESERVOIR) -> np.ndarray:
    """Vectorized :func:`hashed_uniform`.

    ``seeds`` and ``id_hashes`` broadcast against each other, so a column of
    seeds against a row of ids yields a (n_seeds, n_items) matrix.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    ids = np.asarray(id_hashes, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = _mix64_array(seeds + np.uint64((_GOLDEN * (stream + 1)) & MASK64))
        h = _mix64_array(ids ^ state)
    return ((h >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
