"""Two-level microscaled FP4 tensors.

A tensor is quantized in two stages:

    global   s_enc = (6 * 448) / amax(t), s_dec = 1 / s_enc
    blocks   per block b, the decode scale s_dec_b = amax_b / 6 is stored
             as the E4M3 code of s_dec_b * s_enc; the usable per-block
             encode scale is recovered from the stored (rounded) value,
             eff_enc_b = s_enc / decode_e4m3(code_b), so that the full
             scale/descale chain cancels exactly up to float64 rounding.

    element  code_i = Q_E2M1(x_i * eff_enc_b)
    decode   x_hat_i = value(code_i) * decode_e4m3(code_b) / s_enc

Descaling is applied as division by the encode scales, which is the same
real number as multiplying by the decode scales but keeps grid-aligned
fixtures bit-exact (division by the exact stored product rounds correctly).

Blocks are 1x16 vectors along a chosen axis or 16x16 tiles; 4-bit codes
saturate when FP8 rounding of the block scale pushes a scaled value
slightly beyond 6, matching hardware clamp semantics.  An all-zero tensor
takes s_enc = 1 by convention; all-zero blocks store a zero scale code and
a zero effective encode scale.  A block whose stored scale underflows the
E4M3 grid to zero is treated the same way: its decode scale is zero, so
its codes carry no information and are zeroed.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import fp_codec
from .backend import USE_NUMBA, njit, prange
from .dense import as_tensor
from .errors import DimensionError, LayoutError, ParseError

BLOCK = 16


class BlockLayout(Enum):
    """Partition of a tensor into scale blocks."""

    VEC_1X16 = "1d"
    TILE_16X16 = "2d"


VEC_1X16 = BlockLayout.VEC_1X16
TILE_16X16 = BlockLayout.TILE_16X16


@dataclass(frozen=True)
class ScaleSet:
    """Global scale pair plus per-block stored scales.

    ``codes`` are the E4M3-stored products s_dec_b * s_enc; ``decoded``
    caches their float64 decodes; ``eff_enc`` are the recovered per-block
    encode scales (zero for blocks with a zero stored scale).
    """

    s_enc: float
    s_dec: float
    codes: np.ndarray
    decoded: np.ndarray
    eff_enc: np.ndarray


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed 4-bit codes plus the scales needed to decode them.

    ``codes`` holds one E2M1 code per element in the tensor's shape;
    ``grid_shape`` arranges blocks as (runs, blocks-per-run) for vector
    layouts (runs enumerate all non-block axes) and (tile rows, tile
    cols) for tiles.  ``axis`` is the axis vector blocks run along.
    """

    shape: tuple
    layout: BlockLayout
    axis: int
    codes: np.ndarray
    scales: ScaleSet
    grid_shape: tuple

    def code_values(self) -> np.ndarray:
        """Decoded E2M1 values (before any scaling)."""
        return fp_codec.decode_e2m1(self.codes)

    def transpose2d(self) -> "QuantizedTensor":
        """Metadata transpose of a 2-D vector-blocked tensor.

        Blocks are unchanged; only the viewing orientation flips, so the
        block grid stays (runs, blocks-per-run).
        """
        if len(self.shape) != 2 or self.layout is not VEC_1X16:
            raise LayoutError("transpose2d applies to 2-D vector-blocked tensors")
        return QuantizedTensor(
            shape=self.shape[::-1],
            layout=self.layout,
            axis=1 - self.axis,
            codes=np.ascontiguousarray(self.codes.T),
            scales=self.scales,
            grid_shape=self.grid_shape,
        )


def _norm_axis(ndim: int, axis: int) -> int:
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise LayoutError(f"axis {axis} out of range for rank {ndim}")
    return axis


def _check_layout(shape, layout: BlockLayout, axis: int) -> int:
    if layout is VEC_1X16:
        axis = _norm_axis(len(shape), axis)
        if shape[axis] % BLOCK != 0:
            raise LayoutError(
                f"dimension {shape[axis]} along axis {axis} is not a multiple of {BLOCK}"
            )
        return axis
    if len(shape) != 2:
        raise LayoutError("16x16 tiles require a 2-D tensor")
    if shape[0] % BLOCK or shape[1] % BLOCK:
        raise LayoutError(f"shape {shape} is not a multiple of {BLOCK}x{BLOCK}")
    return 0


def _moved_shape(shape, axis: int):
    dims = list(shape)
    dims.append(dims.pop(axis))
    return dims


def _grid_shape(shape, layout: BlockLayout, axis: int):
    """Block grid: (runs, blocks per run) for vectors, tile grid for tiles."""
    if layout is VEC_1X16:
        moved = _moved_shape(shape, axis)
        runs = int(np.prod(moved[:-1], dtype=np.int64)) if len(moved) > 1 else 1
        return (runs, moved[-1] // BLOCK)
    return (shape[0] // BLOCK, shape[1] // BLOCK)


def _to_blocks(t: np.ndarray, layout: BlockLayout, axis: int):
    """Return (blocks, grid_shape): blocks is (nblocks, blocksize)."""
    if layout is VEC_1X16:
        moved = np.ascontiguousarray(np.moveaxis(t, axis, -1))
        return moved.reshape(-1, BLOCK), _grid_shape(t.shape, layout, axis)
    r, c = t.shape
    tiles = t.reshape(r // BLOCK, BLOCK, c // BLOCK, BLOCK).swapaxes(1, 2)
    return (np.ascontiguousarray(tiles).reshape(-1, BLOCK * BLOCK),
            _grid_shape(t.shape, layout, axis))


def _per_element(per_block: np.ndarray, shape, layout: BlockLayout, axis: int) -> np.ndarray:
    """Broadcast a per-block vector back to tensor shape."""
    if layout is VEC_1X16:
        expanded = np.repeat(per_block, BLOCK).reshape(_moved_shape(shape, axis))
        return np.ascontiguousarray(np.moveaxis(expanded, -1, axis))
    r, c = shape
    grid = per_block.reshape(r // BLOCK, c // BLOCK)
    return np.repeat(np.repeat(grid, BLOCK, axis=0), BLOCK, axis=1)


def compute_global_scales(t) -> tuple:
    """Tensor-level (s_enc, s_dec) mapping amax onto the FP4*FP8 range."""
    t = as_tensor(t)
    amax = float(np.max(np.abs(t))) if t.size else 0.0
    if amax == 0.0:
        raise ValueError("global scale undefined for an all-zero tensor")
    s_enc = (fp_codec.E2M1_MAX * fp_codec.E4M3_MAX) / amax
    return s_enc, 1.0 / s_enc


def compute_block_scales(t, layout: BlockLayout = VEC_1X16, s_enc: float = 1.0,
                         axis: int = -1) -> ScaleSet:
    """Per-block decode scales stored in E4M3, plus recovered encode scales."""
    t = as_tensor(t)
    axis = _check_layout(t.shape, layout, axis)
    blocks, _ = _to_blocks(t, layout, axis)
    amax_b = np.max(np.abs(blocks), axis=1)
    s_dec_b = amax_b / fp_codec.E2M1_MAX
    codes = fp_codec.quantize_e4m3(s_dec_b * s_enc)
    decoded = fp_codec.decode_e4m3(codes)
    eff_enc = np.zeros_like(decoded)
    live = decoded > 0.0
    eff_enc[live] = s_enc / decoded[live]
    return ScaleSet(
        s_enc=float(s_enc),
        s_dec=1.0 / float(s_enc),
        codes=codes,
        decoded=decoded,
        eff_enc=eff_enc,
    )


def quantize_tensor(t, layout: BlockLayout = VEC_1X16,
                    mode: fp_codec.RoundingMode = fp_codec.RTN,
                    axis: int = -1) -> QuantizedTensor:
    """Quantize a tensor to 4-bit codes under two-level scaling.

    SR draws are keyed by (mode.seed, flat element index), independent of
    layout and axis.
    """
    t = as_tensor(t)
    axis = _check_layout(t.shape, layout, axis)
    amax = float(np.max(np.abs(t))) if t.size else 0.0
    if amax == 0.0:
        s_enc = 1.0  # all-zero convention: no rescaling
    else:
        s_enc, _ = compute_global_scales(t)
    scales = compute_block_scales(t, layout, s_enc, axis)
    scaled = t * _per_element(scales.eff_enc, t.shape, layout, axis)
    codes = fp_codec.quantize_e2m1(scaled, mode)
    # Dead blocks (zero stored scale) decode to zero regardless of codes.
    codes = np.where(_per_element(scales.decoded, t.shape, layout, axis) > 0.0,
                     codes, np.uint8(0))
    return QuantizedTensor(
        shape=t.shape,
        layout=layout,
        axis=axis,
        codes=np.ascontiguousarray(codes),
        scales=scales,
        grid_shape=_grid_shape(t.shape, layout, axis),
    )


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    """Decode back to float64: value * block decode scale / s_enc."""
    vals = q.code_values()
    block_dec = _per_element(q.scales.decoded, q.shape, q.layout, q.axis)
    return (vals * block_dec) / q.scales.s_enc


def ftz_ratio(t, layout: BlockLayout = VEC_1X16, axis: int = -1) -> float:
    """Fraction of elements whose scaled value quantizes to exactly zero.

    Counted over all elements with deterministic rounding; structural
    zeros count as flushed.
    """
    q = quantize_tensor(t, layout, fp_codec.RTN, axis)
    return float(np.mean((q.codes & 0x7) == 0))


@njit(cache=True, parallel=True)
def _qgemm_kernel(va, ga, vb, gbt, out):
    m, n = va.shape
    k = vb.shape[1]
    nb = n // 16
    for i in prange(m):
        for j in range(k):
            acc = 0.0
            for bt in range(nb):
                s = 0.0
                base = bt * 16
                for r in range(16):
                    s += va[i, base + r] * vb[base + r, j]
                acc += ga[i, bt] * gbt[j, bt] * s
            out[i, j] = acc


def _qgemm_numpy(va, ga, vb, gbt):
    m, n = va.shape
    k = vb.shape[1]
    nb = n // 16
    out = np.zeros((m, k))
    for bt in range(nb):
        base = bt * 16
        s = np.zeros((m, k))
        for r in range(16):
            s += va[:, base + r, None] * vb[None, base + r, :]
        out += ga[:, bt, None] * gbt[None, :, bt] * s
    return out


def qgemm(qa: QuantizedTensor, qb: QuantizedTensor) -> np.ndarray:
    """Blockwise-descaled product of two quantized matrices.

    ``qa`` must carry 1x16 blocks along its last axis and ``qb`` along its
    first axis (both along the contraction).  Per contraction block, code
    values are accumulated in 64-bit, scaled by both stored block scales,
    summed over blocks, and finally descaled by both global encode scales.
    """
    for q, want_axis, name in ((qa, 1, "left"), (qb, 0, "right")):
        if q.layout is not VEC_1X16:
            raise LayoutError(f"{name} operand must use 1x16 vector blocks")
        if len(q.shape) != 2:
            raise DimensionError("qgemm expects 2-D operands")
        if q.axis != want_axis:
            raise LayoutError(
                f"{name} operand blocks must run along the contraction axis"
            )
    if qa.shape[1] != qb.shape[0]:
        raise DimensionError(f"inner dimensions differ: {qa.shape} x {qb.shape}")
    va = qa.code_values()
    vb = qb.code_values()
    ga = qa.scales.decoded.reshape(qa.grid_shape)       # (m, nb)
    gbt = qb.scales.decoded.reshape(qb.grid_shape)      # (k, nb)
    if USE_NUMBA:
        out = np.empty((qa.shape[0], qb.shape[1]))
        _qgemm_kernel(va, ga, vb, gbt, out)
    else:
        out = _qgemm_numpy(va, ga, vb, gbt)
    return out / (qa.scales.s_enc * qb.scales.s_enc)


# ----------------------------------------------------------------------
# NVQ1 quantized-tensor dump format
#
#   bytes 0-3  magic "NVQ1"
#   byte  4    version (1)
#   byte  5    layout tag (0 = 1x16 vectors along the last axis,
#              1 = 16x16 tiles)
#   bytes 6-7  reserved, zero
#   bytes 8-11 rank u32 LE, then rank x u64 LE dims
#   then s_dec as binary64 LE, one E4M3 byte per block, and the codes
#   packed two per byte (low nibble = even flat index)
# ----------------------------------------------------------------------

NVQ1_MAGIC = b"NVQ1"


def pack_codes(codes: np.ndarray) -> bytes:
    flat = codes.reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << np.uint8(4))).tobytes()


def unpack_codes(buf: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def write_nvq1(path, q: QuantizedTensor) -> None:
    import struct

    if q.layout is VEC_1X16 and q.axis != len(q.shape) - 1:
        raise LayoutError("NVQ1 stores vector blocks along the last axis only")
    tag = 0 if q.layout is VEC_1X16 else 1
    with open(path, "wb") as fh:
        fh.write(NVQ1_MAGIC)
        fh.write(struct.pack("<BBH", 1, tag, 0))
        fh.write(struct.pack("<I", len(q.shape)))
        for d in q.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(struct.pack("<d", q.scales.s_dec))
        fh.write(q.scales.codes.tobytes())
        fh.write(pack_codes(q.codes))


def read_nvq1(path) -> QuantizedTensor:
    import struct

    with open(path, "rb") as fh:
        data = fh.read()

    def need(n: int, offset: int, what: str) -> bytes:
        if len(data) < offset + n:
            raise ParseError(f"truncated dump while reading {what}", len(data))
        return data[offset : offset + n]

    if need(4, 0, "magic") != NVQ1_MAGIC:
        raise ParseError("bad magic", 0)
    if need(1, 4, "version")[0] != 1:
        raise ParseError("unsupported version", 4)
    tag = need(1, 5, "layout tag")[0]
    if tag not in (0, 1):
        raise ParseError(f"unknown layout tag {tag}", 5)
    layout = VEC_1X16 if tag == 0 else TILE_16X16
    (ndim,) = struct.unpack("<I", need(4, 8, "rank"))
    offset = 12
    shape = []
    for axisn in range(ndim):
        (d,) = struct.unpack("<Q", need(8, offset, f"dim {axisn}"))
        shape.append(int(d))
        offset += 8
    shape = tuple(shape)
    axis = _check_layout(shape, layout, -1 if layout is VEC_1X16 else 0)
    (s_dec,) = struct.unpack("<d", need(8, offset, "global scale"))
    offset += 8
    count = 1
    for d in shape:
        count *= d
    bsize = BLOCK if layout is VEC_1X16 else BLOCK * BLOCK
    nblocks = count // bsize
    scale_codes = np.frombuffer(need(nblocks, offset, "block scales"), dtype=np.uint8).copy()
    offset += nblocks
    packed_len = (count + 1) // 2
    codes = unpack_codes(need(packed_len, offset, "codes"), count)
    offset += packed_len
    if len(data) != offset:
        raise ParseError("trailing bytes after payload", offset)
    decoded = fp_codec.decode_e4m3(scale_codes)
    s_enc = 1.0 / s_dec
    eff_enc = np.zeros_like(decoded)
    live = decoded > 0.0
    eff_enc[live] = s_enc / decoded[live]
    grid_shape = _grid_shape(shape, layout, axis)
    return QuantizedTensor(
        shape=shape,
        layout=layout,
        axis=axis,
        codes=codes.reshape(shape),
        scales=ScaleSet(s_enc=s_enc, s_dec=s_dec, codes=scale_codes,
                        decoded=decoded, eff_enc=eff_enc),
        grid_shape=grid_shape,
    )
