"""Bit-exact lab for two-level FP4 microscaling quantization.

Scalar codecs (E2M1 data, E4M3 scale storage), two-level tensor
quantization with a blockwise-descaled GEMM, hot-channel residual
compensation, Hadamard-stabilized stochastic-rounding gradients, outlier
diagnostics, a fake-quantized linear layer, and a CSV sweep/verification
CLI.
"""

from .backend import active_backend
from .dense import (
    PriorSpec,
    as_tensor,
    frobenius_energy,
    gemm,
    read_nvt1,
    sample_prior,
    write_nvt1,
)
from .diagnostics import (
    BlockKurtosis,
    DiagnosticsReport,
    TopKRecord,
    block_kurtosis,
    excess_kurtosis,
    sensitivity_score,
    softmax_health,
    swiglu_alignment,
    topk_magnitudes,
    weight_overlap,
    write_report_csv,
)
from .fp_codec import (
    RTN,
    RoundingMode,
    decode_e2m1,
    decode_e4m3,
    e2m1_value_table,
    quantize_e2m1,
    quantize_e4m3,
    sr,
)
from .hcp import (
    ChannelSet,
    HcpConfig,
    build_patched_operands,
    channel_scores,
    default_hot_channel_count,
    hcp_matmul,
    mse,
    parse_hcp_config,
    residuals,
    select_hot_channels,
)
from .microscale import (
    TILE_16X16,
    VEC_1X16,
    BlockLayout,
    QuantizedTensor,
    ScaleSet,
    compute_block_scales,
    compute_global_scales,
    dequantize_tensor,
    ftz_ratio,
    qgemm,
    quantize_tensor,
    read_nvq1,
    write_nvq1,
)
from .quantlinear import QuantLinear, RecipeConfig, loss_gap, toy_train
from .rht import SignDiagonal, rht_apply, sign_diagonal, walsh_hadamard, wgrad_with_rht

__version__ = "0.1.0"
