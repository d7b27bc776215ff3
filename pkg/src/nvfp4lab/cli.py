"""Batch harness: prior sweeps, identity verification, dump diagnostics,
and toy-trainer runs.  All outputs are CSV; runs are reproducible from
the master seed (each sweep cell derives its own stream from the seed and
its cell coordinates, so execution order never changes results).

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O or parse
error.
"""

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import diagnostics, fp_codec, hcp, quantlinear, rht, rng
from .dense import PriorSpec, gemm, read_nvt1, sample_prior
from .errors import ConfigError, LayoutError, ParseError
from .microscale import (
    BLOCK,
    TILE_16X16,
    VEC_1X16,
    dequantize_tensor,
    ftz_ratio,
    quantize_tensor,
)

SWEEP_HEADER = ("size", "prior", "config", "k", "trial_mean_mse", "trial_stderr", "n_trials")
DEFAULT_SIZES = (256, 1024, 2048)
DEFAULT_KS = (16, 32, 64, 128)
DEFAULT_CONFIGS = ("baseline", "S-O1-W", "S-O1-A", "D-O1-W", "D-O1-A", "S-O2-B", "D-O2-B")
DEFAULT_PRIORS = ("gaussian", "laplace")
_PRIOR_ID = {"gaussian": 1, "laplace": 2}


@dataclass
class SweepSpec:
    sizes: tuple = DEFAULT_SIZES
    ks: tuple = DEFAULT_KS
    configs: tuple = DEFAULT_CONFIGS
    priors: tuple = DEFAULT_PRIORS
    trials: int = 20
    cols: int = 64
    scale: float = 1.0
    seed: int = 0
    out: str = "sweep.csv"
    jobs: int = 1
    layout: str = "1d"

    def __post_init__(self):
        for name in self.configs:
            if name != "baseline":
                hcp.parse_hcp_config(name)
        for prior in self.priors:
            if prior not in _PRIOR_ID:
                raise ConfigError(f"unknown prior {prior!r}")
        if self.layout not in ("1d", "2d"):
            raise ConfigError(f"layout must be '1d' or '2d', got {self.layout!r}")


def _sweep_group(spec: SweepSpec, size: int, prior: str, k: int):
    """Rows for one (size, prior, k) group.

    The group's streams derive from (seed, coordinates) alone, so groups
    can run in any order or in parallel without changing results; within
    the group every configuration sees the same operand draws, keeping
    mean-MSE comparisons paired.
    """
    per_config = {name: [] for name in spec.configs}
    layout = VEC_1X16 if spec.layout == "1d" else TILE_16X16
    for trial in range(spec.trials):
        cell = rng.derive_seed(spec.seed, size, _PRIOR_ID[prior], k, trial)
        w = sample_prior(PriorSpec(prior, spec.scale, rng.derive_seed(cell, 1)),
                         (size, spec.cols))
        x = sample_prior(PriorSpec(prior, spec.scale, rng.derive_seed(cell, 2)),
                         (size, spec.cols))
        ref = gemm(w.T, x)
        for name in spec.configs:
            if name == "baseline":
                cfg = hcp.HcpConfig("single", "o2", "b", k=0)
            else:
                cfg = hcp.parse_hcp_config(name, k=k)
            per_config[name].append(
                hcp.mse(hcp.hcp_matmul(w, x, cfg, layout=layout), ref))
    rows = []
    for name in spec.configs:
        vals = np.array(per_config[name])
        stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append((size, prior, name, k, float(vals.mean()), stderr, len(vals)))
    return rows


def run_sweep(spec: SweepSpec):
    """Run the full sweep grid; returns the CSV rows (also written out).

    With ``jobs > 1`` the (size, prior, k) groups run in a process pool;
    output is identical for any job count.
    """
    groups = [(size, prior, k) for size in spec.sizes
              for prior in spec.priors for k in spec.ks]
    if spec.jobs > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        # spawn: forking after the jit threading layer starts is unsafe
        with ProcessPoolExecutor(max_workers=spec.jobs,
                                 mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(partial(_sweep_group_star, spec), groups))
    else:
        results = [_sweep_group(spec, *group) for group in groups]
    rows = [row for group_rows in results for row in group_rows]
    with open(spec.out, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1], row[2], row[3],
                             repr(row[4]), repr(row[5]), row[6]])
    return rows


def _sweep_group_star(spec: SweepSpec, group):
    return _sweep_group(spec, *group)


# ----------------------------------------------------------------------
# verify: identity and ordering checks with printed residuals
# ----------------------------------------------------------------------


def _rel_residual(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def _check_codec_fixed_point():
    worst = 0.0
    for code in range(16):
        v = fp_codec.decode_e2m1(code)
        v2 = fp_codec.decode_e2m1(fp_codec.quantize_e2m1(v))
        worst = max(worst, abs(v2 - v))
    for code in range(256):
        if code in fp_codec.E4M3_NAN_CODES:
            continue
        v = fp_codec.decode_e4m3(code)
        v2 = fp_codec.decode_e4m3(fp_codec.quantize_e4m3(v))
        worst = max(worst, abs(v2 - v))
    return worst == 0.0, worst


def _check_rtn_nearest(seed):
    xs = np.linspace(-7.0, 7.0, 20001)
    got = fp_codec.decode_e2m1(fp_codec.quantize_e2m1(xs))
    err = np.abs(xs - got)
    best = np.min(np.abs(xs[:, None] - np.concatenate([-fp_codec.E2M1_VALUES[1:],
                                                       fp_codec.E2M1_VALUES])[None, :]),
                  axis=1)
    worst = float(np.max(err - best))
    return worst <= 0.0, worst


def _quantized_pair(w, x, mode=fp_codec.RTN):
    qw = quantize_tensor(w, VEC_1X16, mode, axis=0)
    qx = quantize_tensor(x, VEC_1X16, mode, axis=0)
    return dequantize_tensor(qw), dequantize_tensor(qx)


def _check_expansion(seed):
    worst = 0.0
    for i in range(5):
        w = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 10, i)), (32, 32))
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 11, i)), (32, 32))
        w_hat, x_hat = _quantized_pair(w, x)
        dw, dx = w - w_hat, x - x_hat
        lhs = gemm(w_hat.T, x_hat)
        rhs = gemm(w.T, x) - gemm(w.T, dx) - gemm(dw.T, x) + gemm(dw.T, dx)
        worst = max(worst, _rel_residual(lhs, rhs))
    return worst < 1e-9, worst


def _check_first_order(seed):
    worst = 0.0
    for i in range(5):
        w = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 20, i)), (32, 32))
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 21, i)), (32, 32))
        cfg = hcp.HcpConfig("single", "o1", "a", k=32, patch_precision="exact")
        got = hcp.hcp_matmul(w, x, cfg)
        w_hat, _ = _quantized_pair(w, x)
        worst = max(worst, _rel_residual(got, gemm(w_hat.T, x)))
    return worst < 1e-9, worst


def _check_second_order(seed):
    worst = 0.0
    for i in range(5):
        w = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 30, i)), (32, 32))
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 31, i)), (32, 32))
        cfg = hcp.HcpConfig("single", "o2", "b", k=32, patch_precision="exact")
        got = hcp.hcp_matmul(w, x, cfg)
        w_hat, x_hat = _quantized_pair(w, x)
        want = gemm(w.T, x) - gemm((w - w_hat).T, (x - x_hat))
        worst = max(worst, _rel_residual(got, want))
    return worst < 1e-9, worst


def _check_mode_equivalence(seed):
    worst = 0.0
    for i in range(5):
        w = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 40, i)), (32, 32))
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 41, i)), (32, 32))
        single = hcp.hcp_matmul(w, x, hcp.HcpConfig("single", "o2", "b", 8, "exact"))
        dual = hcp.hcp_matmul(w, x, hcp.HcpConfig("dual", "o2", "b", 8, "exact"))
        worst = max(worst, _rel_residual(single, dual))
    return worst < 1e-10, worst


def _check_error_ordering(seed, trials=100):
    wins = 0
    for i in range(trials):
        w = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 50, i)), (64, 64))
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 51, i)), (64, 64))
        w_hat, x_hat = _quantized_pair(w, x)
        channels = hcp.select_hot_channels(
            hcp.channel_scores(x - x_hat, w - w_hat), 8)
        mses = hcp.restricted_product_mses(w, x, channels)
        if mses["second_order"] < mses["first_order"] < mses["baseline"]:
            wins += 1
    frac = wins / trials
    return frac >= 0.95, frac


def _check_rht_invariance(seed):
    worst = 0.0
    for i in range(5):
        x = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 60, i)), (32, 8))
        dy = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 61, i)), (32, 4))
        got = rht.wgrad_with_rht(x, dy, quantize=False, d_seed=i)
        worst = max(worst, _rel_residual(got, gemm(x.T, dy)))
    return worst < 1e-10, worst


def _check_ftz_homogeneity(seed):
    t = sample_prior(PriorSpec("gaussian", 1.0, rng.derive_seed(seed, 70)), (32, 32))
    base = ftz_ratio(t)
    worst = 0.0
    for alpha in (2.0**-20, 2.0**20):
        worst = max(worst, abs(ftz_ratio(alpha * t) - base))
    return worst == 0.0, worst


def verify_identities(seed: int = 0, stream=None) -> bool:
    """Run the identity/ordering suite; prints one line per check."""
    stream = stream or sys.stdout
    checks = [
        ("codec_value_fixed_point", _check_codec_fixed_point()),
        ("rtn_nearest_oracle", _check_rtn_nearest(seed)),
        ("expansion_identity", _check_expansion(seed)),
        ("first_order_identity", _check_first_order(seed)),
        ("second_order_identity", _check_second_order(seed)),
        ("mode_equivalence", _check_mode_equivalence(seed)),
        ("error_ordering", _check_error_ordering(seed)),
        ("rht_invariance", _check_rht_invariance(seed)),
        ("ftz_homogeneity", _check_ftz_homogeneity(seed)),
    ]
    all_ok = True
    for name, (ok, value) in checks:
        status = "PASS" if ok else "FAIL"
        label = "pass_fraction" if name == "error_ordering" else "residual"
        print(f"{status} {name:26s} {label}={value:.6e}", file=stream)
        all_ok &= ok
    return all_ok


# ----------------------------------------------------------------------
# analyze: metrics for an NVT1 dump
# ----------------------------------------------------------------------


def _pad_to_blocks(t: np.ndarray, layout) -> np.ndarray:
    if layout is VEC_1X16:
        extra = (-t.shape[-1]) % BLOCK
        if extra == 0:
            return t
        pad = [(0, 0)] * (t.ndim - 1) + [(0, extra)]
        return np.pad(t, pad)
    pads = [((-d) % BLOCK) for d in t.shape]
    return np.pad(t, [(0, p) for p in pads])


def analyze_dump(path, layout=VEC_1X16, pad: bool = False, k: int = 3):
    """Metrics report for a tensor dump.

    Moment, top-k and energy metrics always use the stored tensor;
    flush-to-zero and tile kurtosis need block-divisible shapes and are
    computed on a zero-padded copy when ``pad`` is set (padding counts as
    flushed elements).
    """
    t = read_nvt1(path)
    report = diagnostics.DiagnosticsReport(source=os.path.basename(str(path)))
    report.add("excess_kurtosis",
               diagnostics.excess_kurtosis(t) if t.size >= 4 else math.nan)
    top = diagnostics.topk_magnitudes(t, min(k, t.size))
    report.add_vector("topk_magnitude", top.values)
    report.add_vector("topk_channel", top.channel_ids.astype(float))
    report.add("frobenius_energy", float(np.sum(t * t)))
    tb = _pad_to_blocks(t, layout) if pad else t
    report.add("ftz_ratio", ftz_ratio(tb, layout))
    if t.ndim == 2:
        tile_t = _pad_to_blocks(t, TILE_16X16) if pad else t
        if tile_t.shape[0] % BLOCK == 0 and tile_t.shape[1] % BLOCK == 0:
            bk = diagnostics.block_kurtosis(tile_t)
            report.add("block_kurtosis_min", bk.min)
            report.add("block_kurtosis_avg", bk.avg)
            report.add("block_kurtosis_max", bk.max)
            report.add("block_kurtosis_excluded", float(bk.n_excluded))
    return report


# ----------------------------------------------------------------------
# argument plumbing
# ----------------------------------------------------------------------


def _parse_int_list(text: str):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_str_list(text: str):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def load_config_file(path) -> dict:
    """Flat key=value config; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvfp4lab",
        description="Sweep, verification and diagnostics harness for the "
                    "two-level FP4 quantization lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    # Sweep flags default to SUPPRESS so explicit flags can be told apart
    # from defaults: hard default < config file < command line.
    p_sweep = sub.add_parser("sweep", help="prior sweep over compensation configs")
    p_sweep.add_argument("--config", help="flat key=value config file")
    p_sweep.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p_sweep.add_argument("--out", default=argparse.SUPPRESS)
    p_sweep.add_argument("--sizes", type=_parse_int_list, default=argparse.SUPPRESS)
    p_sweep.add_argument("--k", default=argparse.SUPPRESS,
                         help="comma list of patch counts, or 'auto' (~9.09%%)")
    p_sweep.add_argument("--hcp", type=_parse_str_list, default=argparse.SUPPRESS,
                         help="comma list of config labels (plus 'baseline')")
    p_sweep.add_argument("--priors", type=_parse_str_list, default=argparse.SUPPRESS)
    p_sweep.add_argument("--trials", type=int, default=argparse.SUPPRESS)
    p_sweep.add_argument("--cols", type=int, default=argparse.SUPPRESS)
    p_sweep.add_argument("--scale", type=float, default=argparse.SUPPRESS)
    p_sweep.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                         help="worker processes for sweep groups")
    p_sweep.add_argument("--layout", choices=("1d", "2d"),
                         default=argparse.SUPPRESS,
                         help="block layout for the quantized products")

    p_verify = sub.add_parser("verify", help="identity and ordering checks")
    p_verify.add_argument("--seed", type=int, default=0)

    p_an = sub.add_parser("analyze", help="diagnostics for an NVT1 dump")
    p_an.add_argument("path")
    p_an.add_argument("--layout", choices=("1d", "2d"), default="1d")
    p_an.add_argument("--pad", action="store_true",
                      help="zero-pad to block multiples for FTZ/tile metrics")
    p_an.add_argument("--topk", type=int, default=3)
    p_an.add_argument("--out", default=None, help="CSV path (default stdout)")

    p_train = sub.add_parser("train", help="toy-trainer runs")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--steps", type=int, default=200)
    p_train.add_argument("--variant", default="all",
                         choices=("all",) + quantlinear.TOY_VARIANTS)
    p_train.add_argument("--out", default="train.csv")
    p_train.add_argument("--diag-every", type=int, default=0)
    p_train.add_argument("--diag-out", default=None)
    return parser


_SWEEP_CASTS = {"sizes": _parse_int_list, "k": str, "hcp": _parse_str_list,
                "priors": _parse_str_list, "trials": int, "cols": int,
                "scale": float, "seed": int, "out": str, "jobs": int,
                "layout": str}
_SWEEP_DEFAULTS = {"sizes": DEFAULT_SIZES, "k": "16,32,64,128",
                   "hcp": DEFAULT_CONFIGS, "priors": DEFAULT_PRIORS,
                   "trials": 20, "cols": 64, "scale": 1.0, "seed": 0,
                   "out": "sweep.csv", "jobs": 1, "layout": "1d"}


def _cmd_sweep(args) -> int:
    merged = dict(_SWEEP_DEFAULTS)
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            if key not in _SWEEP_CASTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _SWEEP_CASTS[key](value)
    for key in _SWEEP_CASTS:
        if hasattr(args, key):
            merged[key] = getattr(args, key)
    spec = SweepSpec(sizes=merged["sizes"], configs=merged["hcp"],
                     priors=merged["priors"], trials=merged["trials"],
                     cols=merged["cols"], scale=merged["scale"],
                     seed=merged["seed"], out=merged["out"],
                     jobs=merged["jobs"], layout=merged["layout"],
                     ks=_resolve_ks(merged["k"], merged["sizes"]))
    run_sweep(spec)
    return 0


def _resolve_ks(text, sizes):
    if text.strip().lower() == "auto":
        return tuple(sorted({hcp.default_hot_channel_count(n) for n in sizes}))
    return _parse_int_list(text)


def _cmd_verify(args) -> int:
    return 0 if verify_identities(args.seed) else 1


def _cmd_analyze(args) -> int:
    layout = VEC_1X16 if args.layout == "1d" else TILE_16X16
    try:
        report = analyze_dump(args.path, layout=layout, pad=args.pad, k=args.topk)
    except LayoutError as err:
        print(f"error: {err} (use --pad)", file=sys.stderr)
        return 2
    if args.out:
        diagnostics.write_report_csv(args.out, [report])
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(diagnostics.REPORT_HEADER)
        writer.writerows(report.rows())
    return 0


def _cmd_train(args) -> int:
    variants = quantlinear.TOY_VARIANTS if args.variant == "all" else (args.variant,)
    all_reports = []
    with open(args.out, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("variant", "seed", "step", "loss"))
        for variant in variants:
            losses, reports = quantlinear.toy_train(
                steps=args.steps, seed=args.seed, variant=variant,
                diagnostics_every=args.diag_every)
            all_reports.extend(reports)
            for step, loss in enumerate(losses):
                writer.writerow((variant, args.seed, step, repr(float(loss))))
    if args.diag_out and all_reports:
        diagnostics.write_report_csv(args.diag_out, all_reports)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
        return _cmd_train(args)
    except (ParseError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
