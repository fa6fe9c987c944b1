"""Command-line interface: ``rsavq <command> [options]``.

Exit codes: 0 on success, 2 for invalid input or I/O problems, 1 for internal
errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate, toymodel
from .edsg import METRIC_MODES, QuantizeConfig, decode, quantize_matrix
from .errors import InvariantError, RsavqError, ValidationError
from .fim import estimate_kronecker_fim
from .tensorio import (
    GradientBundle,
    _atomic_write,
    read_bundle,
    read_quantized,
    read_tensor,
    write_bundle,
    write_quantized,
    write_tensor,
)
from .wcsg import ALLOCATION_RULES, ChannelMetric, analyze

# Maps QuantizeConfig fields to CLI option names.
CONFIG_FLAGS = {
    "vector_length": "--vector-length",
    "group_count": "--group-count",
    "target_bits": "--target-bits",
    "lam": "--lambda",
    "kmeans_iters": "--kmeans-iters",
    "kmeans_tol": "--kmeans-tol",
    "metric_mode": "--metric-mode",
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _number_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _seed_list(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [_u64(t) for t in text.split(",") if t.strip()]


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="JSON", help="quantization config file (CLI flags take precedence)")
    g.add_argument("--seed", type=_u64, help="random seed (u64)")
    g.add_argument("-o", "--out", metavar="DIR", default=".", help="output directory (default: current)")
    g.add_argument(
        "--channel-axis",
        choices=("rows", "cols"),
        default="rows",
        help="treat rows (default) or columns of the weight as channels",
    )
    g.add_argument("--format", choices=("csv", "json"), help="report format (default: both)")
    return p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("quantization options")
    g.add_argument("--vector-length", type=int, help="vector length v (default 6)")
    g.add_argument("--group-count", type=int, help="number of channel groups G (default 4)")
    g.add_argument("--target-bits", type=float, help="target bits per weight (default 2.0)")
    g.add_argument("--lambda", dest="lam", type=float, help="projection strength (default 0.05)")
    g.add_argument("--kmeans-iters", type=int, help="maximum Lloyd iterations (default 50)")
    g.add_argument("--kmeans-tol", type=float, help="relative objective tolerance (default 1e-8)")
    g.add_argument("--metric-mode", choices=METRIC_MODES, help="k-means metric (default fisher-diagonal)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="rsavq", description="Sensitivity-aware grouped vector quantization of weight matrices."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-toy", parents=[common], help="generate a toy calibration task")
    p.add_argument("--preset", choices=sorted(toymodel.PRESETS), default="default", help="task generator")
    p.add_argument("--m", type=int, help="number of classes / output channels")
    p.add_argument("--n", type=int, help="input dimension")
    p.add_argument("--samples", type=int, help="calibration inputs")
    p.add_argument("--sequence-length", type=int, help="inputs averaged per gradient sample")

    p = sub.add_parser("analyze", parents=[common], help="channel sensitivity and bit allocation report")
    p.add_argument("--grads", required=True, help="gradient bundle (RSQB file or directory)")
    p.add_argument("--target-bits", type=float, help="target bits per weight (default 2.0)")
    p.add_argument("--group-count", type=int, help="number of channel groups G (default 4)")
    p.add_argument("--rule", choices=ALLOCATION_RULES, default="lagrangian", help="allocation rule")

    p = sub.add_parser("quantize", parents=[common], help="quantize a weight matrix")
    p.add_argument("--weights", required=True, help="weight tensor (RSQT)")
    p.add_argument("--grads", required=True, help="gradient bundle (RSQB file or directory)")
    _add_config_flags(p)

    p = sub.add_parser("dequantize", parents=[common], help="decode an artifact to a tensor")
    p.add_argument("--artifact", required=True, help="quantized artifact (RSQQ)")

    p = sub.add_parser("eval", parents=[common], help="error metrics for a weight / reconstruction pair")
    p.add_argument("--weights", required=True, help="reference weight tensor (RSQT)")
    p.add_argument("--w-hat", required=True, help="reconstructed tensor (RSQT)")
    p.add_argument("--grads", required=True, help="gradient bundle used for the Fisher metric")
    p.add_argument("--task", help="gen-toy directory; adds calibration and holdout loss deltas")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation on a gen-toy task")
    p.add_argument("--task", required=True, help="gen-toy output directory")
    p.add_argument("--axis", choices=evaluate.AXES, default="components", help="ablation axis")
    p.add_argument("--values", type=_number_list, help="comma-separated sweep values")
    p.add_argument("--seeds", type=_seed_list, help="seeds as 'a,b,c' or 'lo..hi' (default 0..19)")
    p.add_argument("--stamp", help="file name stamp (default: UTC time)")
    _add_config_flags(p)
    return parser


def resolve_config(args) -> QuantizeConfig:
    """Defaults, then the config file, then explicit flags."""
    cfg = QuantizeConfig()
    if getattr(args, "config", None):
        cfg = QuantizeConfig.from_json(args.config, cfg)
    overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(cfg, **overrides) if overrides else cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    _atomic_write(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode())


def _channels_first(w: np.ndarray, axis: str) -> np.ndarray:
    return w.T.copy() if axis == "cols" else w


def _bundle_channels_first(bundle: GradientBundle, axis: str) -> GradientBundle:
    return GradientBundle(bundle.samples.transpose(0, 2, 1)) if axis == "cols" else bundle


def load_task(directory) -> toymodel.ToyTask:
    """Rebuild a gen-toy task from its directory and check it against the stored files."""
    root = Path(directory)
    meta = json.loads((root / "task.json").read_text())
    task = toymodel.make_task(
        meta.get("preset", "default"),
        meta["seed"],
        meta["M"],
        meta["N"],
        meta["S"],
        meta.get("sequence_length", 1),
    )
    stored = read_tensor(root / "w.rsqt")
    if not np.array_equal(stored, task.weight.astype(np.float32)):
        raise ValidationError(f"{root / 'w.rsqt'} does not match the task described by task.json")
    return task


def cmd_gen_toy(args) -> int:
    task = toymodel.make_task(args.preset, args.seed or 0, args.m, args.n, args.samples, args.sequence_length)
    out = _out_dir(args)
    bundle = toymodel.grad_samples(task, task.weight)
    write_tensor(task.weight, out / "w.rsqt")
    write_tensor(task.inputs, out / "inputs.rsqt")
    write_bundle(bundle, out / "grads.rsqb")
    _write_json(out / "labels.json", [int(y) for y in task.labels])
    m, n = task.shape
    meta = {
        "M": m,
        "N": n,
        "S": task.sample_count,
        "seed": task.rng_seed,
        "preset": task.preset,
        "sequence_length": task.sequence_length,
    }
    _write_json(out / "task.json", meta)
    summary = dict(meta, loss=toymodel.loss(task, task.weight), bundle_samples=bundle.sample_count)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    bundle = _bundle_channels_first(read_bundle(args.grads), args.channel_axis)
    cfg = resolve_config(args)
    target = args.target_bits if args.target_bits is not None else cfg.target_bits
    groups = args.group_count if args.group_count is not None else cfg.group_count
    fim = estimate_kronecker_fim(bundle)
    profile = analyze(bundle.mean(), ChannelMetric.from_fim(fim), target, groups, rule=args.rule)
    report = profile.to_dict()
    _write_json(_out_dir(args) / "analysis.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_quantize(args) -> int:
    cfg = resolve_config(args)
    w = _channels_first(read_tensor(args.weights), args.channel_axis)
    bundle = _bundle_channels_first(read_bundle(args.grads), args.channel_axis)
    q, profile = quantize_matrix(w, bundle, cfg)
    w_hat = decode(q)
    m = evaluate.metrics(w, w_hat, estimate_kronecker_fim(bundle), profile)
    out = _out_dir(args)
    write_quantized(q, out / "artifact.rsqq")
    _write_json(out / "profile.json", dict(profile.to_dict(), config=cfg.to_dict()))
    print(f"bits={q.avg_bits():.6g} groups={len(q.groups)} distortion={m.fisher_distortion:.6g}")
    return 0


def cmd_dequantize(args) -> int:
    q = read_quantized(args.artifact)
    w_hat = _channels_first(decode(q), args.channel_axis)
    path = _out_dir(args) / "w_hat.rsqt"
    write_tensor(w_hat, path)
    print(str(path))
    return 0


def cmd_eval(args) -> int:
    w_file = read_tensor(args.weights)
    w_hat_file = read_tensor(args.w_hat)
    w = _channels_first(w_file, args.channel_axis)
    w_hat = _channels_first(w_hat_file, args.channel_axis)
    bundle = _bundle_channels_first(read_bundle(args.grads), args.channel_axis)
    if w.shape != w_hat.shape or bundle.shape != w.shape:
        raise ValidationError(f"shapes disagree: weights {w.shape}, w_hat {w_hat.shape}, grads {bundle.shape}")
    m = evaluate.metrics(w, w_hat, estimate_kronecker_fim(bundle))
    report = {
        "euclid_mse": m.euclid_mse,
        "fisher_distortion": m.fisher_distortion,
        "kl_quadratic": m.kl_quadratic_value,
    }
    if args.task:
        # The toy model consumes weights in file orientation.
        task = load_task(args.task)
        hold = toymodel.holdout(task)
        report["loss_delta_calib"] = toymodel.loss(task, w_hat_file) - toymodel.loss(task, w_file)
        report["loss_delta_holdout"] = toymodel.loss(hold, w_hat_file) - toymodel.loss(hold, w_file)
    _write_json(_out_dir(args) / "metrics.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    task = load_task(args.task)
    seeds = args.seeds or ([args.seed] if args.seed is not None else list(range(20)))
    if not seeds:
        raise ValidationError("--seeds must list at least one seed")
    values = args.values
    if args.axis != "components":
        if not values:
            raise ValidationError(f"--values is required for axis {args.axis}")
        if args.axis in ("group_count", "vector_length"):
            if any(v != int(v) for v in values):
                raise ValidationError(f"{args.axis} values must be integers")
            values = [int(v) for v in values]
    reports = evaluate.run_seeds(task, cfg, seeds, args.axis, values)
    report = evaluate.median_report(reports)
    stamp = args.stamp or time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    fmt = args.format or "both"
    paths = evaluate.write_report(report, _out_dir(args), fmt, stamp, per_seed=reports)
    print(json.dumps({"files": [str(p) for p in paths], **evaluate.summarize(reports)}, sort_keys=True))
    return 0


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "analyze": cmd_analyze,
    "quantize": cmd_quantize,
    "dequantize": cmd_dequantize,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InvariantError as exc:
        print(f"rsavq: internal error: {exc}", file=sys.stderr)
        return 1
    except (RsavqError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"rsavq: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        print(f"rsavq: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
