"""Outlier and health metrics for tensors under 4-bit training.

Moment-based metrics use population (biased) estimators throughout; a
zero-variance group has no defined kurtosis and is reported as missing
(NaN) rather than 0, so trajectories never silently mix semantics.
Entropy is measured in nats.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dense import as_tensor, frobenius_energy
from .errors import DimensionError, LayoutError
from .microscale import BLOCK, VEC_1X16, BlockLayout, ftz_ratio


def excess_kurtosis(values) -> float:
    """Fourth standardized moment minus 3; NaN when variance is zero."""
    x = as_tensor(values).reshape(-1)
    if x.size < 4:
        raise DimensionError("kurtosis needs at least 4 values")
    mu = x.mean()
    centered = x - mu
    var = np.mean(centered * centered)
    if var == 0.0:
        return math.nan
    return float(np.mean(centered**4) / var**2 - 3.0)


@dataclass(frozen=True)
class BlockKurtosis:
    """Tile-level kurtosis aggregates; degenerate tiles are excluded."""

    min: float
    avg: float
    max: float
    n_blocks: int
    n_excluded: int


def block_kurtosis(t, tile: int = BLOCK) -> BlockKurtosis:
    """Excess kurtosis per square tile, aggregated to (min, avg, max).

    Zero-variance tiles are excluded from the aggregates and counted
    separately; if every tile is degenerate the aggregates are NaN.
    """
    t = as_tensor(t)
    if t.ndim != 2 or t.shape[0] % tile or t.shape[1] % tile:
        raise DimensionError(f"tensor shape {t.shape} must tile by {tile}x{tile}")
    r, c = t.shape
    blocks = (
        t.reshape(r // tile, tile, c // tile, tile)
        .swapaxes(1, 2)
        .reshape(-1, tile * tile)
    )
    mu = blocks.mean(axis=1, keepdims=True)
    centered = blocks - mu
    var = np.mean(centered * centered, axis=1)
    live = var > 0.0
    kappa = np.full(blocks.shape[0], math.nan)
    kappa[live] = np.mean(centered[live] ** 4, axis=1) / var[live] ** 2 - 3.0
    n_excluded = int(np.sum(~live))
    if not np.any(live):
        return BlockKurtosis(math.nan, math.nan, math.nan, blocks.shape[0], n_excluded)
    alive = kappa[live]
    return BlockKurtosis(
        min=float(alive.min()),
        avg=float(alive.mean()),
        max=float(alive.max()),
        n_blocks=blocks.shape[0],
        n_excluded=n_excluded,
    )


@dataclass(frozen=True)
class TopKRecord:
    """Largest magnitudes with flat indices and channel coordinates."""

    k: int
    values: np.ndarray
    indices: np.ndarray
    channel_ids: np.ndarray


def topk_magnitudes(t, k: int) -> TopKRecord:
    """The k largest |x| in descending order; ties go to lower flat index.

    Channel ids are column indices for matrices and flat indices for
    vectors.
    """
    t = as_tensor(t)
    flat = np.abs(t).reshape(-1)
    if k > flat.size:
        raise DimensionError(f"cannot take top {k} of {flat.size} elements")
    order = np.argsort(-flat, kind="stable")[:k]
    channels = order % t.shape[-1] if t.ndim >= 2 else order
    return TopKRecord(
        k=k,
        values=flat[order],
        indices=order.astype(np.int64),
        channel_ids=channels.astype(np.int64),
    )


def swiglu_alignment(w_up, w_gate) -> float:
    """Mean absolute cosine between paired rows of the two matrices.

    Rows with zero norm on either side are skipped; NaN if none remain.
    """
    w_up = as_tensor(w_up)
    w_gate = as_tensor(w_gate)
    if w_up.shape != w_gate.shape or w_up.ndim != 2:
        raise DimensionError("expected two matrices of identical shape")
    nu = np.linalg.norm(w_up, axis=1)
    ng = np.linalg.norm(w_gate, axis=1)
    live = (nu > 0) & (ng > 0)
    if not np.any(live):
        return math.nan
    dots = np.abs(np.sum(w_up[live] * w_gate[live], axis=1))
    return float(np.mean(dots / (nu[live] * ng[live])))


def softmax_health(logit_rows):
    """(post-softmax entropy, pre-softmax kurtosis, pre-softmax max).

    Each statistic is computed per row and averaged; entropy is in nats,
    kurtosis averages over rows with nonzero variance (NaN if none).
    """
    t = as_tensor(logit_rows)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.shape[1] < 4:
        raise DimensionError("rows need at least 4 entries")
    shifted = t - t.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    entropy = float(np.mean(-plogp.sum(axis=1)))
    kappas = [excess_kurtosis(row) for row in t]
    finite = [kk for kk in kappas if not math.isnan(kk)]
    kurt = float(np.mean(finite)) if finite else math.nan
    return entropy, kurt, float(np.mean(t.max(axis=1)))


def weight_overlap(w) -> float:
    """Sum of squared off-diagonal entries of the row correlation matrix.

    Rows are normalized to unit length first; zero rows are skipped.
    """
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[0] < 2:
        raise DimensionError("expected a matrix with at least two rows")
    norms = np.linalg.norm(w, axis=1)
    live = norms > 0
    rows = w[live] / norms[live, None]
    if rows.shape[0] < 2:
        return 0.0
    gram = rows @ rows.T
    off = gram - np.diag(np.diag(gram))
    return float(np.sum(off * off))


def sensitivity_score(loss_quantized: float, loss_baseline: float,
                      param_count: int, unit: float = 1e6) -> float:
    """Loss degradation per ``unit`` of parameters (signed)."""
    if param_count <= 0:
        raise ValueError("param_count must be positive")
    return (loss_quantized - loss_baseline) / (param_count / unit)


# ----------------------------------------------------------------------
# Report plumbing: named metric entries serialized as CSV rows
# ``step,source,metric,axis,value`` with missing values left empty.
# ----------------------------------------------------------------------

REPORT_HEADER = ("step", "source", "metric", "axis", "value")


@dataclass
class DiagnosticsReport:
    source: str
    step: int = 0
    entries: list = field(default_factory=list)

    def add(self, metric: str, value, axis: str = ""):
        self.entries.append((metric, axis, value))

    def add_vector(self, metric: str, values, axes=None):
        for i, v in enumerate(np.asarray(values).reshape(-1)):
            label = str(axes[i]) if axes is not None else str(i)
            self.entries.append((metric, label, float(v)))

    def rows(self):
        for metric, axis, value in self.entries:
            missing = value is None or (isinstance(value, float) and math.isnan(value))
            yield (self.step, self.source, metric, axis, "" if missing else repr(float(value)))


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for report in reports:
            writer.writerows(report.rows())


def tensor_report(t, source: str, step: int = 0,
                  layout: BlockLayout = VEC_1X16, k: int = 3) -> DiagnosticsReport:
    """Standard per-tensor metric bundle (kurtosis, tiles, top-k, flush,
    energy)."""
    t = as_tensor(t)
    report = DiagnosticsReport(source=source, step=step)
    report.add("excess_kurtosis", excess_kurtosis(t))
    if t.ndim == 2 and t.shape[0] % BLOCK == 0 and t.shape[1] % BLOCK == 0:
        bk = block_kurtosis(t)
        report.add("block_kurtosis_min", bk.min)
        report.add("block_kurtosis_avg", bk.avg)
        report.add("block_kurtosis_max", bk.max)
        report.add("block_kurtosis_excluded", float(bk.n_excluded))
    top = topk_magnitudes(t, min(k, t.size))
    report.add_vector("topk_magnitude", top.values)
    report.add_vector("topk_channel", top.channel_ids.astype(float))
    try:
        report.add("ftz_ratio", ftz_ratio(t, layout))
    except LayoutError:
        report.add("ftz_ratio", math.nan)
    report.add("frobenius_energy", frobenius_energy(t))
    return report
