"""Bit-exact scalar codecs for the FP4 E2M1 and FP8 E4M3 minifloat formats.

E2M1 (1 sign, 2 exponent, 1 mantissa; exponent bias 1):

    code  0     1     2     3     4     5     6     7
    value 0.0   0.5   1.0   1.5   2.0   3.0   4.0   6.0

Bit 3 is the sign; both zero patterns (0b0000, 0b1000) decode to +0.0,
and encoders only ever emit the canonical +0 pattern (so encode(decode)
is the identity on every code they produce).  The largest representable
magnitude is 6.

E4M3 (1 sign, 4 exponent, 3 mantissa; exponent bias 7):

    No infinities; the single NaN pattern per sign is exponent=15,
    mantissa=7 (0x7F / 0xFF) and is never produced by the encoder.
    Largest finite magnitude is 448; smallest subnormal is 2**-9.

Rounding:

    RTN  round to nearest; exact midpoints go to the candidate whose
         code has a zero (even) mantissa bit.  Inputs beyond the max
         magnitude saturate.
    SR   stochastic rounding between the two bracketing representables;
         the upper one is chosen with probability (x - lo) / (hi - lo).
         Draws come from the SplitMix64 stream keyed by (seed, element
         index), so results are reproducible and order-independent.
         Out-of-range inputs saturate deterministically.

Array-level encoders dispatch to numba kernels or vectorized numpy per
``backend.USE_NUMBA``; both paths are bit-identical.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .backend import USE_NUMBA, njit, prange
from .errors import CodecError

E2M1_VALUES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
E2M1_MAX = 6.0
E4M3_MAX = 448.0
E4M3_NAN_CODES = (0x7F, 0xFF)


@dataclass(frozen=True)
class RoundingMode:
    """Rounding discipline for scalar encoders.

    ``kind`` is "rtn" or "sr"; SR carries an explicit stream seed.
    """

    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rtn", "sr"):
            raise ValueError(f"unknown rounding kind {self.kind!r}")


RTN = RoundingMode("rtn")


def sr(seed: int = 0) -> RoundingMode:
    """Stochastic rounding keyed by ``seed``."""
    return RoundingMode("sr", seed)


def split_sr(mode: RoundingMode, tag: int) -> RoundingMode:
    """Independent sub-stream for one operand of a multi-tensor op.

    Streams are keyed by (seed, element index), so two tensors encoded
    with the same SR mode would share draws at equal flat positions and
    correlate their rounding errors; splitting per operand keeps product
    expectations unbiased.  RTN passes through unchanged.
    """
    if mode.kind != "sr":
        return mode
    return sr(rng.derive_seed(mode.seed, tag))


def _build_e4m3_values() -> np.ndarray:
    """Decode table for all 256 E4M3 codes (NaN patterns hold nan)."""
    vals = np.empty(256)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0x0F
        man = code & 0x07
        if exp == 15 and man == 7:
            vals[code] = np.nan
        elif exp == 0:
            vals[code] = sign * man * 2.0**-9
        else:
            vals[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return vals


E4M3_VALUES = _build_e4m3_values()
# Non-negative magnitudes in code order (code 0..126); code order equals
# value order for this layout, which makes tie-to-even == tie-to-even-code.
E4M3_POS_VALUES = E4M3_VALUES[:127].copy()


def e2m1_value_table():
    """All 16 (code, decoded value) pairs; zero patterns normalize to +0.0."""
    table = []
    for code in range(16):
        mag = E2M1_VALUES[code & 0x7]
        val = -mag if (code & 0x8) and mag != 0.0 else mag
        table.append((code, float(val)))
    return table


# ----------------------------------------------------------------------
# Nearest-with-tie-to-even over a sorted magnitude table.  Adjacent codes
# alternate mantissa parity, so "even mantissa bit" is "even table index".
# ----------------------------------------------------------------------


def _nearest_even_numpy(mag: np.ndarray, table: np.ndarray) -> np.ndarray:
    hi = np.searchsorted(table, mag, side="left").astype(np.int64)
    hi = np.minimum(hi, len(table) - 1)
    lo = np.maximum(hi - 1, 0)
    d_lo = mag - table[lo]
    d_hi = table[hi] - mag
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    return np.where(pick_hi, hi, lo).astype(np.uint8)


@njit(cache=True)
def _nearest_even_scalar(mag: float, table: np.ndarray) -> int:
    n = len(table)
    hi = np.searchsorted(table, mag)
    if hi >= n:
        hi = n - 1
    lo = hi - 1 if hi > 0 else 0
    d_lo = mag - table[lo]
    d_hi = table[hi] - mag
    if d_hi < d_lo or (d_hi == d_lo and hi % 2 == 0):
        return hi
    return lo


@njit(cache=True, parallel=True)
def _encode_rtn_kernel(x: np.ndarray, table: np.ndarray, vmax: float, out: np.ndarray):
    for i in prange(x.shape[0]):
        v = x[i]
        mag = -v if v < 0.0 else v
        if mag > vmax:
            mag = vmax
        code = _nearest_even_scalar(mag, table)
        # zero magnitudes take the canonical +0 code regardless of sign
        if v < 0.0 and code != 0:
            code |= 0x8 if len(table) == 8 else 0x80
        out[i] = code


def _encode_rtn_numpy(x: np.ndarray, table: np.ndarray, vmax: float) -> np.ndarray:
    mag = np.minimum(np.abs(x), vmax)
    codes = _nearest_even_numpy(mag, table)
    sign_bit = np.uint8(0x8 if len(table) == 8 else 0x80)
    return np.where((x < 0.0) & (codes != 0), codes | sign_bit, codes).astype(np.uint8)


_GOLDEN_U = np.uint64(rng.GOLDEN)
_MIX_A_U = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B_U = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _uniform_at(seed: np.uint64, idx: np.uint64) -> float:
    z = seed + (idx + np.uint64(1)) * _GOLDEN_U
    z = (z ^ (z >> np.uint64(30))) * _MIX_A_U
    z = (z ^ (z >> np.uint64(27))) * _MIX_B_U
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)) * rng.U53


@njit(cache=True, parallel=True)
def _encode_sr_kernel(
    x: np.ndarray, table: np.ndarray, vmax: float, seed: np.uint64,
    idx: np.ndarray, out: np.ndarray,
):
    n = len(table)
    for i in prange(x.shape[0]):
        v = x[i]
        mag = -v if v < 0.0 else v
        if mag >= vmax:
            code = n - 1  # deterministic saturation
        else:
            hi = np.searchsorted(table, mag, side="right")
            lo = hi - 1
            gap = table[hi] - table[lo]
            p = (mag - table[lo]) / gap
            u = _uniform_at(seed, idx[i])
            code = hi if u < p else lo
        if v < 0.0 and code != 0:
            code |= 0x8 if n == 8 else 0x80
        out[i] = code


def _encode_sr_numpy(
    x: np.ndarray, table: np.ndarray, vmax: float, seed: int, idx: np.ndarray
) -> np.ndarray:
    mag = np.abs(x)
    inrange = mag < vmax
    hi = np.searchsorted(table, np.minimum(mag, vmax), side="right")
    hi = np.minimum(hi, len(table) - 1)
    lo = np.maximum(hi - 1, 0)
    gap = table[hi] - table[lo]
    gap[gap == 0.0] = 1.0  # saturated entries, probability unused
    p = (mag - table[lo]) / gap
    u = rng.uniforms(seed, idx)
    codes = np.where(inrange & (u < p), hi, np.where(inrange, lo, len(table) - 1))
    sign_bit = 0x8 if len(table) == 8 else 0x80
    return np.where((x < 0.0) & (codes != 0), codes | sign_bit, codes).astype(np.uint8)


def _encode_array(x, table, vmax, mode: RoundingMode, index) -> np.ndarray:
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise CodecError("cannot encode non-finite values")
    out = np.empty(flat.shape[0], dtype=np.uint8)
    if mode.kind == "rtn":
        if USE_NUMBA:
            _encode_rtn_kernel(flat, table, vmax, out)
        else:
            out = _encode_rtn_numpy(flat, table, vmax)
    else:
        if index is None:
            idx = np.arange(flat.shape[0], dtype=np.uint64)
        else:
            idx = np.ascontiguousarray(index, dtype=np.uint64).reshape(-1)
            if idx.shape[0] != flat.shape[0]:
                raise ValueError("index array must match input length")
        if USE_NUMBA:
            _encode_sr_kernel(flat, table, vmax, np.uint64(mode.seed & rng.MASK64), idx, out)
        else:
            out = _encode_sr_numpy(flat, table, vmax, mode.seed, idx)
    return out.reshape(np.shape(x))


def quantize_e2m1(x, mode: RoundingMode = RTN, index=None):
    """Encode value(s) to E2M1 codes (uint8 in 0..15).

    ``index`` fixes the SR stream position per element; it defaults to the
    flat element index so array and scalar calls agree.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    codes = _encode_array(x, E2M1_VALUES, E2M1_MAX, mode, index)
    return int(codes) if scalar else codes


def decode_e2m1(codes):
    """Decode E2M1 code(s); negative zero normalizes to +0.0."""
    arr = np.asarray(codes, dtype=np.uint8)
    if arr.size and int(arr.max()) > 0x0F:
        raise CodecError("E2M1 codes are 4-bit")
    mag = E2M1_VALUES[arr & 0x7]
    vals = np.where((arr & 0x8) != 0, -mag, mag) + 0.0  # +0.0 folds -0.0
    return float(vals) if np.isscalar(codes) or np.ndim(codes) == 0 else vals


def quantize_e4m3(x):
    """Encode value(s) to E4M3 codes with round-to-nearest-even.

    Saturates at the max finite magnitude 448; never emits a NaN pattern.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    codes = _encode_array(x, E4M3_POS_VALUES, E4M3_MAX, RTN, None)
    return int(codes) if scalar else codes


def decode_e4m3(codes):
    """Decode E4M3 code(s); NaN patterns are rejected."""
    arr = np.asarray(codes, dtype=np.uint8)
    if arr.size and (np.any(arr == 0x7F) or np.any(arr == 0xFF)):
        raise CodecError("cannot decode an E4M3 NaN pattern")
    vals = E4M3_VALUES[arr] + 0.0
    return float(vals) if np.isscalar(codes) or np.ndim(codes) == 0 else vals
