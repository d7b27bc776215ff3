"""Fake-quantized linear layer and a desk-scale trainer.

The layer computes ``y = x @ w`` with x of shape (batch, in) and w of
shape (in, out).  Three products are involved per training step: the
forward product, the input-gradient product ``dy @ w.T`` and the
weight-gradient product ``x.T @ dy``.  Each can run exactly, through
two-level 4-bit quantization (deterministic rounding forward, stochastic
rounding backward, optional Hadamard stabilization of the weight
gradient), or through the hot-channel compensated path.

Gradients use straight-through semantics: they flow through the
quantizers as identity, so disabling quantization reproduces exact
linear-layer math bit for bit.

The toy trainer fits a small gated two-layer network (64 -> 256 -> 64)
to a fixed synthetic regression task with plain SGD.  It exists for
directional comparisons between exact and quantized variants only; no
large-scale loss figures are reproduced at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diagnostics, fp_codec, hcp, rng
from .dense import as_tensor, gemm
from .errors import StateError
from .microscale import (
    TILE_16X16,
    VEC_1X16,
    BlockLayout,
    dequantize_tensor,
    qgemm,
    quantize_tensor,
)
from .rht import wgrad_with_rht


@dataclass(frozen=True)
class RecipeConfig:
    """Per-layer quantization recipe.

    ``high_precision`` keeps all three products exact for the layer (the
    protection flag for quantization-sensitive operators);
    ``quantize_enabled=False`` keeps the quantized code path but turns
    every quantizer into the identity (test hook).
    """

    forward_mode: fp_codec.RoundingMode = fp_codec.RTN
    backward_mode: fp_codec.RoundingMode = fp_codec.sr(0)
    use_rht: bool = True
    weight_layout: BlockLayout = TILE_16X16
    act_grad_layout: BlockLayout = VEC_1X16
    hcp: hcp.HcpConfig = None
    high_precision: bool = False
    quantize_enabled: bool = True
    hcp_refresh_every: int = 100
    # "fprop" compensates the forward product only; "all" extends to the
    # input-gradient product and, when the Hadamard path is off, to the
    # weight-gradient product.
    hcp_scope: str = "fprop"


def loss_gap(loss_quantized: float, loss_baseline: float) -> float:
    """Relative loss gap of a quantized run against its exact baseline."""
    return (loss_quantized - loss_baseline) / loss_baseline


def _fake_quant(t, layout, mode, axis):
    return dequantize_tensor(quantize_tensor(t, layout, mode, axis=axis))


class QuantLinear:
    """Single-owner mutable state for one linear layer."""

    def __init__(self, weight, cfg: RecipeConfig, layer_id: int = 0):
        self.weight = as_tensor(weight)
        self.cfg = cfg
        self.layer_id = layer_id
        self._cached_x = None
        self._channels = {}

    # -- hot-channel persistence -------------------------------------

    def _hcp_channels(self, role: str, w_c: np.ndarray, x_c: np.ndarray,
                      step: int) -> hcp.ChannelSet:
        cfg = self.cfg
        held = self._channels.get(role)
        stale = (
            held is None
            or (cfg.hcp_refresh_every > 0
                and step - held.step_created >= cfg.hcp_refresh_every)
        )
        if stale:
            qw = quantize_tensor(w_c, VEC_1X16, cfg.forward_mode, axis=0)
            qx = quantize_tensor(x_c, VEC_1X16, cfg.forward_mode, axis=0)
            dw = w_c - dequantize_tensor(qw)
            dx = x_c - dequantize_tensor(qx)
            scores = hcp.channel_scores(dx, dw)
            self._channels[role] = hcp.select_hot_channels(scores, cfg.hcp.k, step)
        return self._channels[role]

    def _hcp_product(self, role: str, w_c, x_c, mode, step: int) -> np.ndarray:
        """Compensated ``w_c.T @ x_c`` with per-role persisted channels."""
        channels = self._hcp_channels(role, w_c, x_c, step)
        return hcp.hcp_matmul(w_c, x_c, self.cfg.hcp, VEC_1X16, mode,
                              channels=channels, step=step)

    # -- products ------------------------------------------------------

    def forward(self, x, step: int = 0) -> np.ndarray:
        cfg = self.cfg
        x = as_tensor(x)
        self._cached_x = x
        if cfg.high_precision or not cfg.quantize_enabled:
            return gemm(x, self.weight)
        if cfg.hcp is not None and cfg.hcp.k > 0:
            x_t = np.ascontiguousarray(x.T)
            out = self._hcp_product("fprop", self.weight, x_t,
                                    cfg.forward_mode, step)
            return np.ascontiguousarray(out.T)
        qx = quantize_tensor(x, cfg.act_grad_layout,
                             fp_codec.split_sr(cfg.forward_mode, 1), axis=-1)
        qw = quantize_tensor(self.weight, cfg.weight_layout,
                             fp_codec.split_sr(cfg.forward_mode, 2), axis=0)
        if cfg.act_grad_layout is VEC_1X16 and cfg.weight_layout is VEC_1X16:
            return qgemm(qx, qw)
        return gemm(dequantize_tensor(qx), dequantize_tensor(qw))

    def backward(self, dy, step: int = 0):
        """(dx, dw) for the cached forward input."""
        cfg = self.cfg
        if self._cached_x is None:
            raise StateError("backward called before forward")
        dy = as_tensor(dy)
        x = self._cached_x
        if cfg.high_precision or not cfg.quantize_enabled:
            dx = gemm(dy, self.weight.T)
            if cfg.use_rht and not cfg.high_precision:
                # identity quantizers still exercise the transform path
                dw = wgrad_with_rht(x, dy, quantize=False,
                                    d_seed=self._seed(step, 3))
            else:
                dw = gemm(x.T, dy)
            return dx, dw

        hcp_all = cfg.hcp is not None and cfg.hcp.k > 0 and cfg.hcp_scope == "all"

        # input gradient: contraction over the output dimension
        mode_dy = self._stream(cfg.backward_mode, step, 1)
        if hcp_all:
            dx = self._hcp_product(
                "dgrad", np.ascontiguousarray(self.weight.T),
                np.ascontiguousarray(dy.T), mode_dy, step).T
            dx = np.ascontiguousarray(dx)
        else:
            qdy = quantize_tensor(dy, cfg.act_grad_layout, mode_dy, axis=-1)
            qw = quantize_tensor(self.weight, cfg.weight_layout, cfg.forward_mode,
                                 axis=-1)
            if cfg.act_grad_layout is VEC_1X16 and cfg.weight_layout is VEC_1X16:
                dx = qgemm(qdy, qw.transpose2d())
            else:
                dx = gemm(dequantize_tensor(qdy), dequantize_tensor(qw).T)

        # weight gradient: contraction over the batch dimension
        if hcp_all and not cfg.use_rht:
            dw = self._hcp_product(
                "wgrad", x, dy, self._stream(cfg.backward_mode, step, 2), step)
        elif cfg.use_rht:
            dw = wgrad_with_rht(
                x, dy, quantize=True,
                mode=self._stream(cfg.backward_mode, step, 2),
                layout=cfg.act_grad_layout,
                d_seed=self._seed(step, 3),
            )
        else:
            mx = self._stream(cfg.backward_mode, step, 4)
            my = self._stream(cfg.backward_mode, step, 5)
            if cfg.act_grad_layout is VEC_1X16:
                qx2 = quantize_tensor(x, VEC_1X16, mx, axis=0)
                qdy2 = quantize_tensor(dy, VEC_1X16, my, axis=0)
                dw = qgemm(qx2.transpose2d(), qdy2)
            else:
                xa = _fake_quant(x, cfg.act_grad_layout, mx, axis=0)
                ya = _fake_quant(dy, cfg.act_grad_layout, my, axis=0)
                dw = gemm(xa.T, ya)
        return dx, dw

    def apply_grad(self, dw, lr: float):
        self.weight = self.weight - lr * dw

    def _seed(self, step: int, role: int) -> int:
        return rng.derive_seed(self.cfg.backward_mode.seed, self.layer_id, step, role)

    def _stream(self, mode: fp_codec.RoundingMode, step: int, role: int):
        if mode.kind != "sr":
            return mode
        return fp_codec.sr(self._seed(step, role))


# ----------------------------------------------------------------------
# Toy trainer: gated 2-layer MLP on a fixed synthetic regression task.
# ----------------------------------------------------------------------

TOY_DIMS = (64, 256, 64)
TOY_BATCH = 128
_TASK_SEED = 0x4E56_4C42
_HOT_COLUMNS = (5, 21, 40, 58)
_HOT_GAIN = 8.0
TOY_VARIANTS = ("exact", "nvfp4", "nvfphcp")


def _toy_task():
    gen = rng.prior_generator(_TASK_SEED)
    d_in, _, d_out = TOY_DIMS
    x = gen.normal(0.0, 1.0, size=(TOY_BATCH, d_in))
    x[:, list(_HOT_COLUMNS)] *= _HOT_GAIN
    teacher = gen.normal(0.0, 1.0, size=(d_in, d_out)) / np.sqrt(d_in)
    return np.ascontiguousarray(x), np.ascontiguousarray(x @ teacher)


def _toy_config(variant: str, seed: int) -> RecipeConfig:
    if variant == "exact":
        return RecipeConfig(quantize_enabled=False, use_rht=False,
                            backward_mode=fp_codec.sr(seed))
    patch = None
    if variant == "nvfphcp":
        patch = hcp.HcpConfig(mode="single", order="o2", target="b", k=8,
                              patch_precision="nvfp4")
    return RecipeConfig(backward_mode=fp_codec.sr(seed), hcp=patch)


def toy_train(steps: int = 200, seed: int = 0, variant: str = "exact",
              lr: float = 0.02, diagnostics_every: int = 0):
    """Train the fixed toy task; returns (losses, reports).

    ``losses[i]`` is the full-batch loss before the i-th update; the run
    is deterministic for a fixed (seed, variant).  Diagnostics reports
    (weight metrics per layer) are emitted every ``diagnostics_every``
    steps when nonzero.
    """
    if variant not in TOY_VARIANTS:
        raise ValueError(f"variant must be one of {TOY_VARIANTS}")
    x, target = _toy_task()
    d_in, d_hid, d_out = TOY_DIMS
    gen = rng.prior_generator(rng.derive_seed(seed, 0x1217))
    cfg = _toy_config(variant, seed)
    lin_up = QuantLinear(gen.normal(0, 1, (d_in, d_hid)) / np.sqrt(d_in), cfg, 1)
    lin_gate = QuantLinear(gen.normal(0, 1, (d_in, d_hid)) / np.sqrt(d_in), cfg, 2)
    lin_down = QuantLinear(gen.normal(0, 1, (d_hid, d_out)) / np.sqrt(d_hid), cfg, 3)

    losses = np.empty(steps)
    reports = []
    inv_n = 1.0 / target.size
    for step in range(steps):
        up = lin_up.forward(x, step)
        gate = lin_gate.forward(x, step)
        sig = 1.0 / (1.0 + np.exp(-gate))
        swish = gate * sig
        hidden = up * swish
        y = lin_down.forward(hidden, step)
        err = y - target
        losses[step] = float(np.mean(err * err))

        d_y = 2.0 * inv_n * err
        d_hidden, d_w_down = lin_down.backward(d_y, step)
        d_up = d_hidden * swish
        d_gate = d_hidden * up * (sig + gate * sig * (1.0 - sig))
        _, d_w_up = lin_up.backward(d_up, step)
        _, d_w_gate = lin_gate.backward(d_gate, step)
        lin_down.apply_grad(d_w_down, lr)
        lin_up.apply_grad(d_w_up, lr)
        lin_gate.apply_grad(d_w_gate, lr)

        if diagnostics_every and step % diagnostics_every == 0:
            for name, layer in (("up", lin_up), ("gate", lin_gate), ("down", lin_down)):
                reports.append(diagnostics.tensor_report(
                    layer.weight, source=f"{variant}/{name}", step=step))
    return losses, reports
