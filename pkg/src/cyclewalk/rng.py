"""Counter-based keyed random streams.

Every random number in the package is a pure function of a key and a
counter, so results never depend on iteration order, batch size or thread
count.  Keys are derived from the master seed plus integer labels
(shape index, replica index, ...).  The mixing function is the SplitMix64
finalizer, applied twice per output.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _u64(x):
    if isinstance(x, (int, np.integer)):
        return np.array([int(x) & _MASK64], dtype=np.uint64)
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return np.atleast_1d(arr)
    return np.atleast_1d(arr.astype(np.int64).view(np.uint64))


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_key(seed, *labels):
    """Fold integer labels (scalars or arrays) into a 64-bit key."""
    h = _mix(_u64(seed) + _GOLDEN)
    for label in labels:
        h = _mix(h ^ (_mix(_u64(label) + _GOLDEN) + _GOLDEN + (h << np.uint64(6)) + (h >> np.uint64(2))))
    return h if h.size > 1 else h.reshape(())[()]


def random_bits(key, counter):
    """64 pseudo-random bits for each (key, counter) pair (broadcast)."""
    k = _u64(key)
    c = _u64(counter)
    return _mix(_mix(k ^ (c * _GOLDEN)) + c)


def uniforms(key, counter):
    """Uniform draws on the open interval (0, 1), one per (key, counter)."""
    bits = random_bits(key, counter)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def generator(seed, *labels):
    """A numpy Generator on a Philox stream keyed by (seed, labels).

    Used where a sequential stream is natural (trial-function sweeps).
    """
    key = int(derive_key(seed, *labels))
    return np.random.Generator(np.random.Philox(key=key))
