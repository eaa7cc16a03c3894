"""Deterministic per-stream seeds derived from one master seed.

Streams are keyed by an integer index so that work can be split into
fixed-size blocks and executed by any number of workers while producing
bit-identical results.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def seed_derivation(master: int, stream_index: int) -> int:
    """Return the 64-bit seed of stream ``stream_index`` under ``master``.

    The map ``index -> seed`` is injective for a fixed master because both the
    xor with the scrambled master and the splitmix finalizer are bijections on
    64-bit words.
    """
    if master < 0 or stream_index < 0:
        raise ValueError("master seed and stream index must be non-negative")
    key = _mix64((master + _GOLDEN) & _MASK)
    return _mix64((key ^ (stream_index & _MASK)) + _GOLDEN & _MASK)


def seed_derivation_many(master: int, indices) -> np.ndarray:
    """Vectorized :func:`seed_derivation` over an integer array of indices."""
    idx = np.asarray(indices, dtype=np.uint64)
    key = np.uint64(_mix64((master + _GOLDEN) & _MASK))
    with np.errstate(over="ignore"):
        z = (key ^ idx) + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def stream_rng(master: int, stream_index: int) -> np.random.Generator:
    return np.random.default_rng(seed_derivation(master, stream_index))
