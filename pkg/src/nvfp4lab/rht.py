"""Randomized Hadamard transform and the stabilized weight-gradient path.

The transform multiplies rows by a seeded +-1 diagonal and applies the
normalized Walsh-Hadamard butterfly along axis 0 (entries +-1/sqrt(n), so
H is orthogonal and involutive).  Applying the same diagonal to both
weight-gradient operands leaves the product invariant in exact
arithmetic:

    (H D x).T @ (H D dy) = x.T @ dy

while spreading localized outliers across the transformed rows before
4-bit quantization.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fp_codec, rng
from .backend import USE_NUMBA, njit, prange
from .dense import as_tensor, gemm
from .errors import DimensionError
from .microscale import BLOCK, VEC_1X16, BlockLayout, dequantize_tensor, quantize_tensor


@dataclass(frozen=True)
class SignDiagonal:
    """Deterministic +-1 diagonal derived from a seed."""

    seed: int
    length: int
    signs: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.length <= 0 or self.length & (self.length - 1):
            raise DimensionError(f"diagonal length {self.length} is not a power of two")
        object.__setattr__(self, "signs", rng.sign_vector(self.seed, self.length))


def sign_diagonal(seed: int, length: int) -> SignDiagonal:
    return SignDiagonal(seed=seed, length=length)


@njit(cache=True, parallel=True)
def _fwht_kernel(x: np.ndarray):
    n, cols = x.shape
    h = 1
    while h < n:
        nblocks = n // (2 * h)
        for blk in prange(nblocks):
            start = blk * 2 * h
            for i in range(start, start + h):
                for j in range(cols):
                    a = x[i, j]
                    b = x[i + h, j]
                    x[i, j] = a + b
                    x[i + h, j] = a - b
        h *= 2


def _fwht_numpy(x: np.ndarray):
    n = x.shape[0]
    h = 1
    while h < n:
        view = x.reshape(n // (2 * h), 2, h, -1)
        a = view[:, 0].copy()
        b = view[:, 1].copy()
        view[:, 0] = a + b
        view[:, 1] = a - b
        h *= 2


def walsh_hadamard(t) -> np.ndarray:
    """Normalized Walsh-Hadamard transform along axis 0 (length 2**p)."""
    t = as_tensor(t)
    n = t.shape[0]
    if n <= 0 or n & (n - 1):
        raise DimensionError(f"transformed dimension {n} is not a power of two")
    out = t.reshape(n, -1).copy()
    if USE_NUMBA:
        _fwht_kernel(out)
    else:
        _fwht_numpy(out)
    out *= 1.0 / np.sqrt(n)
    return out.reshape(t.shape)


def rht_apply(t, d: SignDiagonal) -> np.ndarray:
    """Sign-flip rows by the diagonal, then transform."""
    t = as_tensor(t)
    if t.shape[0] != d.length:
        raise DimensionError(f"diagonal length {d.length} != leading dim {t.shape[0]}")
    signs = d.signs.reshape((-1,) + (1,) * (t.ndim - 1))
    return walsh_hadamard(t * signs)


def _pad_rows(t: np.ndarray, target: int) -> np.ndarray:
    if t.shape[0] == target:
        return t
    pad = np.zeros((target - t.shape[0],) + t.shape[1:])
    return np.vstack([t, pad])


def _transform_length(n: int, quantize: bool) -> int:
    target = 1 << (n - 1).bit_length()
    if quantize:
        target = max(target, BLOCK)
    return target


def wgrad_with_rht(x, dy, quantize: bool = False,
                   mode: fp_codec.RoundingMode = None,
                   layout: BlockLayout = VEC_1X16,
                   d_seed: int = 0,
                   independent_dy_diagonal: bool = False) -> np.ndarray:
    """Weight gradient ``x.T @ dy`` through the transform.

    Both operands receive the same sign diagonal (exact-arithmetic
    invariance); ``independent_dy_diagonal`` flips the gradient side with
    its own diagonal for empirical comparison only, which breaks the
    exact identity.  With ``quantize`` the transformed operands pass
    through two-level 4-bit quantization (stochastic rounding by default,
    separate streams per operand) before the 64-bit contraction.

    Token counts that are not a power of two (or shorter than one scale
    block when quantizing) are zero-padded; padding is inert for the
    product.
    """
    x = as_tensor(x)
    dy = as_tensor(dy)
    if x.ndim != 2 or dy.ndim != 2 or x.shape[0] != dy.shape[0]:
        raise DimensionError("operands must share the token dimension")
    n = _transform_length(x.shape[0], quantize)
    d = sign_diagonal(d_seed, n)
    d2 = sign_diagonal(rng.derive_seed(d_seed, 0xD2), n) if independent_dy_diagonal else d
    xt = rht_apply(_pad_rows(x, n), d)
    yt = rht_apply(_pad_rows(dy, n), d2)
    if quantize:
        if mode is None:
            mode = fp_codec.sr(d_seed)
        mx = fp_codec.split_sr(mode, 1)
        my = fp_codec.split_sr(mode, 2)
        xt = dequantize_tensor(quantize_tensor(xt, layout, mx, axis=0))
        yt = dequantize_tensor(quantize_tensor(yt, layout, my, axis=0))
    return gemm(xt.T, yt)
