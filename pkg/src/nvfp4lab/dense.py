"""High-precision tensors, random priors, and the reference GEMM.

Tensors are plain float64 numpy arrays treated as immutable values: every
operation returns a fresh array and never mutates its inputs.  All math
here runs in 64-bit so algebraic identities can be tested far below
quantization noise.

The GEMM accumulates each output element over the contraction index in
ascending order (both backends), which makes it reproduce an element-by-
element triple-loop oracle exactly; the numba path parallelizes over
output rows, which does not change any accumulation order.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .backend import USE_NUMBA, njit, prange
from .errors import DimensionError, ParseError


def as_tensor(data) -> np.ndarray:
    """Validate and normalize input into a float64 row-major array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass(frozen=True)
class PriorSpec:
    """Sampling prior: distribution in {"gaussian", "laplace"}, scale > 0."""

    distribution: str
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "laplace"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def sample_prior(spec: PriorSpec, shape) -> np.ndarray:
    """Draw a tensor from the prior; bit-reproducible for a fixed seed.

    Gaussian is N(0, scale**2); Laplace has density exp(-|x|/b) / (2b)
    with b = scale.
    """
    gen = rng.prior_generator(spec.seed)
    if spec.distribution == "gaussian":
        out = gen.normal(0.0, spec.scale, size=shape)
    else:
        out = gen.laplace(0.0, spec.scale, size=shape)
    return np.ascontiguousarray(out)


@njit(cache=True, parallel=True)
def _gemm_kernel(a: np.ndarray, b: np.ndarray, out: np.ndarray):
    m, n = a.shape
    k = b.shape[1]
    for i in prange(m):
        for j in range(k):
            acc = 0.0
            for t in range(n):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc


def _gemm_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Rank-1 updates in ascending t keep the accumulation order identical
    # to the triple loop, so both backends agree bit-for-bit.
    out = np.zeros((a.shape[0], b.shape[1]))
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]
    return out


def gemm(a, b) -> np.ndarray:
    """64-bit matrix product with sequential per-element accumulation."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("gemm expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if USE_NUMBA:
        out = np.empty((a.shape[0], b.shape[1]))
        _gemm_kernel(a, b, out)
        return out
    return _gemm_numpy(a, b)


def frobenius_energy(t) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    t = as_tensor(t)
    return float(np.sum(t * t))


# ----------------------------------------------------------------------
# NVT1 tensor dump format
#
#   bytes 0-3   magic "NVT1"
#   byte  4     version (1)
#   byte  5     dtype tag (0 = little-endian IEEE-754 binary32)
#   bytes 6-7   reserved, zero
#   bytes 8-11  rank, unsigned 32-bit LE
#   then rank x unsigned 64-bit LE dims, then the row-major payload
# ----------------------------------------------------------------------

NVT1_MAGIC = b"NVT1"


def write_nvt1(path, t) -> None:
    """Write a tensor dump (payload stored as binary32)."""
    t = as_tensor(t)
    with open(path, "wb") as fh:
        fh.write(NVT1_MAGIC)
        fh.write(struct.pack("<BBH", 1, 0, 0))
        fh.write(struct.pack("<I", t.ndim))
        for d in t.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(t.astype("<f4").tobytes())


def read_nvt1(path) -> np.ndarray:
    """Read an NVT1 dump back into a float64 tensor.

    Rejects unknown magic/version/dtype and truncation, naming the byte
    offset of the defect.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    def need(n: int, offset: int, what: str) -> bytes:
        if len(data) < offset + n:
            raise ParseError(f"truncated dump while reading {what}", len(data))
        return data[offset : offset + n]

    if need(4, 0, "magic") != NVT1_MAGIC:
        raise ParseError("bad magic", 0)
    version = need(1, 4, "version")[0]
    if version != 1:
        raise ParseError(f"unsupported version {version}", 4)
    dtype_tag = need(1, 5, "dtype tag")[0]
    if dtype_tag != 0:
        raise ParseError(f"unknown dtype tag {dtype_tag}", 5)
    if need(2, 6, "reserved bytes") != b"\x00\x00":
        raise ParseError("reserved bytes must be zero", 6)
    (ndim,) = struct.unpack("<I", need(4, 8, "rank"))
    offset = 12
    shape = []
    for axis in range(ndim):
        (d,) = struct.unpack("<Q", need(8, offset, f"dim {axis}"))
        shape.append(d)
        offset += 8
    count = 1
    for d in shape:
        count *= d
    payload = need(4 * count, offset, "payload")
    if len(data) != offset + 4 * count:
        raise ParseError("trailing bytes after payload", offset + 4 * count)
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ParseError("payload contains non-finite values", offset)
    return np.ascontiguousarray(arr)
