"""Counter-based random streams.

Stochastic rounding and sign diagonals draw from a SplitMix64 stream:

    word(seed, i) = mix64(seed + (i + 1) * GOLDEN)   (mod 2**64)

where ``mix64`` is the SplitMix64 finalizer and GOLDEN is 2**64 / phi.
Every draw is a pure function of (seed, index), so results are
reproducible and independent of evaluation order; parallel kernels can
consume the stream per element without coordination.

Dense priors use numpy's Philox generator keyed by the seed (also
counter-based), which pins Gaussian/Laplace sampling bit-for-bit for a
given numpy version.
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB

# 2**-53; (word >> 11) * U53 is uniform on [0, 1) with 53 random bits.
U53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit word (Python-int reference)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & MASK64
    return (z ^ (z >> 31)) & MASK64


def stream_word(seed: int, index: int) -> int:
    """The ``index``-th 64-bit word of the stream keyed by ``seed``."""
    return mix64((seed + (index + 1) * GOLDEN) & MASK64)


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into ``seed`` to split off an independent stream."""
    out = mix64(seed & MASK64)
    for t in tags:
        out = mix64((out ^ mix64(t & MASK64)) & MASK64)
    return out


def _mix64_arr(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX_A)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX_B)
    z ^= z >> np.uint64(31)
    return z


def stream_words(seed: int, index: np.ndarray) -> np.ndarray:
    """Vectorized ``stream_word`` over an index array."""
    idx = index.astype(np.uint64, copy=False)
    z = (idx + np.uint64(1)) * np.uint64(GOLDEN) + np.uint64(seed & MASK64)
    return _mix64_arr(z)


def uniforms(seed: int, index: np.ndarray) -> np.ndarray:
    """Per-index uniforms on [0, 1), independent of evaluation order."""
    return (stream_words(seed, index) >> np.uint64(11)).astype(np.float64) * U53


def sign_vector(seed: int, n: int) -> np.ndarray:
    """Deterministic +-1 vector of length ``n`` keyed by ``seed``."""
    bits = stream_words(seed, np.arange(n, dtype=np.uint64)) & np.uint64(1)
    return 1.0 - 2.0 * bits.astype(np.float64)


def prior_generator(seed: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` (used for sampling priors)."""
    return np.random.Generator(np.random.Philox(key=seed & MASK64))
