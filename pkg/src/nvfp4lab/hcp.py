"""Hot-channel residual patching for quantized matrix products.

Orientation: ``product(w, x) = w.T @ x`` with ``w`` of shape (n, m) and
``x`` of shape (n, k); the shared axis 0 indexes channels.  Residuals use
the convention ``delta = original - dequantized`` throughout.

Compensation appends residual/dequantized channel pairs to the operands
so the extra contraction recovers chosen error terms on a selected channel
set I.  With exact patches the recovered products are, restricted to I:

    baseline            w_hat.T @ x_hat
    first order (A)     w_hat.T @ x         (activation residual patched)
    first order (W)     w.T @ x_hat         (weight residual patched)
    second order (B)    w.T @ x - dw.T @ dx (both patched)

Six configurations are supported, written "{S|D}-{O1|O2}-{W|A|B}":
single-kernel mode concatenates the patch channels and accumulates them
with the base product in one pass, dual mode accumulates base and
correction separately.  Patch sections carry their own scale sets in
both modes, so the two modes always agree to accumulation tolerance.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import fp_codec, rng
from .dense import as_tensor, gemm
from .errors import ConfigError, DimensionError
from .microscale import (
    BLOCK,
    TILE_16X16,
    VEC_1X16,
    BlockLayout,
    QuantizedTensor,
    dequantize_tensor,
    qgemm,
    quantize_tensor,
)

_MODES = ("single", "dual")
_ORDERS = ("o1", "o2")
_TARGETS = ("w", "a", "b")
_PRECISIONS = ("nvfp4", "exact")


@dataclass(frozen=True)
class HcpConfig:
    """Compensation configuration: mode x order x target x patch count."""

    mode: str
    order: str
    target: str
    k: int
    patch_precision: str = "nvfp4"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.order not in _ORDERS:
            raise ConfigError(f"order must be one of {_ORDERS}, got {self.order!r}")
        if self.target not in _TARGETS:
            raise ConfigError(f"target must be one of {_TARGETS}, got {self.target!r}")
        if self.order == "o2" and self.target != "b":
            raise ConfigError("second-order recovery patches both operands (target B)")
        if self.order == "o1" and self.target == "b":
            raise ConfigError("first-order recovery is single-sided (target W or A)")
        if self.k < 0:
            raise ConfigError("patch count must be non-negative")
        if self.patch_precision not in _PRECISIONS:
            raise ConfigError(f"unknown patch precision {self.patch_precision!r}")

    def label(self) -> str:
        return f"{self.mode[0].upper()}-{self.order.upper()}-{self.target.upper()}"


def parse_hcp_config(text: str, k: int = 0, patch_precision: str = "nvfp4") -> HcpConfig:
    """Parse a "{S|D}-{O1|O2}-{W|A|B}" configuration label."""
    parts = text.strip().split("-")
    if len(parts) != 3:
        raise ConfigError(f"cannot parse configuration {text!r}")
    mode = {"S": "single", "D": "dual"}.get(parts[0].upper())
    order = parts[1].lower()
    target = parts[2].lower()
    if mode is None or order not in _ORDERS or target not in _TARGETS:
        raise ConfigError(f"cannot parse configuration {text!r}")
    return HcpConfig(mode=mode, order=order, target=target, k=k,
                     patch_precision=patch_precision)


def default_hot_channel_count(n: int) -> int:
    """Default patch budget: about 9.09% of channels, rounded up."""
    return math.ceil(0.0909 * n)


@dataclass(frozen=True)
class ChannelSet:
    """Selected hot channels with their scores, sorted ascending."""

    indices: np.ndarray
    scores: np.ndarray
    step_created: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or (idx.size > 1 and not np.all(np.diff(idx) > 0)):
            raise ValueError("channel indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))


def residuals(t, q: QuantizedTensor) -> np.ndarray:
    """Quantization residual: original minus dequantized."""
    t = as_tensor(t)
    if t.shape != tuple(q.shape):
        raise DimensionError(f"shape mismatch: {t.shape} vs {tuple(q.shape)}")
    return t - dequantize_tensor(q)


def channel_scores(dx, dw, normalized: bool = True) -> np.ndarray:
    """Per-channel importance from both residuals.

    Channel j scores the mean absolute activation residual of row j plus
    the mean absolute weight residual of row j (each l1 norm divided by
    the opposing dimension).  ``normalized=False`` uses plain l1 sums,
    which rebalances the two terms by constant factors.
    """
    dx = as_tensor(dx)
    dw = as_tensor(dw)
    if dx.ndim != 2 or dw.ndim != 2 or dx.shape[0] != dw.shape[0]:
        raise DimensionError("residuals must share the channel dimension")
    if normalized:
        return np.abs(dx).mean(axis=1) + np.abs(dw).mean(axis=1)
    return np.abs(dx).sum(axis=1) + np.abs(dw).sum(axis=1)


def select_hot_channels(scores, k: int, step: int = 0) -> ChannelSet:
    """Indices of the k largest scores; ties break toward smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise DimensionError(f"cannot select {k} of {scores.size} channels")
    order = np.argsort(-scores, kind="stable")[:k]
    idx = np.sort(order)
    return ChannelSet(indices=idx, scores=scores[idx], step_created=step)


def mse(y, y_ref) -> float:
    """Mean squared elementwise difference."""
    y = as_tensor(y)
    y_ref = as_tensor(y_ref)
    if y.shape != y_ref.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_ref.shape}")
    d = y - y_ref
    return float(np.mean(d * d))


def _pad_channels(a: np.ndarray) -> np.ndarray:
    """Zero-pad channel rows up to a block multiple (inert for products)."""
    missing = (-a.shape[0]) % BLOCK
    if missing == 0:
        return a
    return np.vstack([a, np.zeros((missing, a.shape[1]))])


def _patch_sections(cfg: HcpConfig, w_hat, x_hat, dw, dx, idx):
    """Channel sections appended to each operand, in pairing order."""
    if cfg.order == "o2":
        return [dw[idx], w_hat[idx]], [x_hat[idx], dx[idx]]
    if cfg.target == "a":
        return [w_hat[idx]], [dx[idx]]
    return [dw[idx]], [x_hat[idx]]


def _quantized_values(t, layout: BlockLayout, mode) -> np.ndarray:
    # Vector blocks run along the channel axis; tiles ignore the axis.
    q = quantize_tensor(t, layout, mode, axis=0)
    return dequantize_tensor(q)


def _patch_values(w_secs, x_secs, cfg: HcpConfig, layout, mode):
    """Patch operand values at the configured precision.

    Each channel section is quantized on its own (own scale set) in both
    kernel modes; the mode axis only controls whether the correction is
    accumulated inside the one concatenated product or in separate ones.
    """
    w_secs = [_pad_channels(s) for s in w_secs]
    x_secs = [_pad_channels(s) for s in x_secs]
    if cfg.patch_precision == "exact":
        return w_secs, x_secs
    base = fp_codec.split_sr(mode, 0xAC)
    return ([_quantized_values(s, layout, fp_codec.split_sr(base, 2 * i))
             for i, s in enumerate(w_secs)],
            [_quantized_values(s, layout, fp_codec.split_sr(base, 2 * i + 1))
             for i, s in enumerate(x_secs)])


def build_patched_operands(w, x, qw: QuantizedTensor, qx: QuantizedTensor,
                           channels: ChannelSet, cfg: HcpConfig,
                           layout: BlockLayout = VEC_1X16,
                           mode: fp_codec.RoundingMode = fp_codec.RTN):
    """Value-level concatenated operands for the single-kernel product.

    Base channels carry the dequantized codes; the appended channel
    sections contribute the configured compensation terms.  The plain
    product of the returned pair equals the single-kernel compensated
    product up to blockwise-descaling tolerance.
    """
    w = as_tensor(w)
    x = as_tensor(x)
    w_hat = dequantize_tensor(qw)
    x_hat = dequantize_tensor(qx)
    if channels.indices.size and int(channels.indices[-1]) >= w.shape[0]:
        raise IndexError("channel index out of range")
    if cfg.k == 0:
        return w_hat, x_hat
    idx = channels.indices
    w_secs, x_secs = _patch_sections(cfg, w_hat, x_hat, w - w_hat, x - x_hat, idx)
    w_secs, x_secs = _patch_values(w_secs, x_secs, cfg, layout, mode)
    return np.vstack([w_hat] + w_secs), np.vstack([x_hat] + x_secs)


def _product_channelwise(qw: QuantizedTensor, qx: QuantizedTensor) -> np.ndarray:
    """w.T @ x for two channel-blocked (axis 0) quantized operands."""
    return qgemm(qw.transpose2d(), qx)


def hcp_matmul(w, x, cfg: HcpConfig, layout: BlockLayout = VEC_1X16,
               mode: fp_codec.RoundingMode = fp_codec.RTN,
               channels: ChannelSet = None, step: int = 0) -> np.ndarray:
    """Compensated quantized product ``w.T @ x``.

    The base term always comes from plain two-level quantization of both
    operands.  With k > 0, the configured correction terms are added for
    the selected channels (``channels`` may carry a persisted selection;
    otherwise channels are scored and selected from this call's
    residuals).
    """
    w = as_tensor(w)
    x = as_tensor(x)
    if w.ndim != 2 or x.ndim != 2 or w.shape[0] != x.shape[0]:
        raise DimensionError("operands must share the channel dimension")
    n = w.shape[0]
    if cfg.k > n:
        raise ConfigError(f"patch count {cfg.k} exceeds {n} channels")

    mode_w = fp_codec.split_sr(mode, 1)
    mode_x = fp_codec.split_sr(mode, 2)
    if layout is VEC_1X16:
        qw = quantize_tensor(w, VEC_1X16, mode_w, axis=0)
        qx = quantize_tensor(x, VEC_1X16, mode_x, axis=0)
        base = _product_channelwise(qw, qx)
    else:
        qw = quantize_tensor(w, TILE_16X16, mode_w)
        qx = quantize_tensor(x, TILE_16X16, mode_x)
        base = gemm(dequantize_tensor(qw).T, dequantize_tensor(qx))
    if cfg.k == 0:
        return base

    w_hat = dequantize_tensor(qw)
    x_hat = dequantize_tensor(qx)
    dw = w - w_hat
    dx = x - x_hat
    if channels is None:
        channels = select_hot_channels(channel_scores(dx, dw), cfg.k, step)
    elif channels.indices.size != cfg.k:
        raise ConfigError("persisted channel set does not match cfg.k")
    idx = channels.indices
    if idx.size and int(idx[-1]) >= n:
        raise IndexError("channel index out of range")

    w_secs, x_secs = _patch_sections(cfg, w_hat, x_hat, dw, dx, idx)
    w_vals, x_vals = _patch_values(w_secs, x_secs, cfg, layout, mode)
    if cfg.mode == "single":
        correction = gemm(np.vstack(w_vals).T, np.vstack(x_vals))
    else:
        correction = np.zeros_like(base)
        for ws, xs in zip(w_vals, x_vals):
            correction = correction + gemm(ws.T, xs)
    return base + correction


def restricted_product_mses(w, x, channels: ChannelSet,
                            mode: fp_codec.RoundingMode = fp_codec.RTN) -> dict:
    """MSE of the three exact-patch estimators on the patched contraction.

    Restricted to the selected channels, compares no compensation, single-
    sided first-order recovery, and second-order recovery against the
    high-precision product, using residuals from real two-level
    quantization of the full operands.
    """
    w = as_tensor(w)
    x = as_tensor(x)
    qw = quantize_tensor(w, VEC_1X16, fp_codec.split_sr(mode, 1), axis=0)
    qx = quantize_tensor(x, VEC_1X16, fp_codec.split_sr(mode, 2), axis=0)
    w_hat = dequantize_tensor(qw)
    x_hat = dequantize_tensor(qx)
    idx = channels.indices
    w_i, x_i = w[idx], x[idx]
    ref = gemm(w_i.T, x_i)
    baseline = gemm(w_hat[idx].T, x_hat[idx])
    first_order = gemm(w_hat[idx].T, x_i)
    second_order = ref - gemm((w_i - w_hat[idx]).T, (x_i - x_hat[idx]))
    return {
        "baseline": mse(baseline, ref),
        "first_order": mse(first_order, ref),
        "second_order": mse(second_order, ref),
    }
