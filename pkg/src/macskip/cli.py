"""Command-line surface: train, calibrate, eval, bench-div.

Reports are JSON with sorted keys and a versioned schema (see
docs/report_schema.md).  report_digest is the sha256 of the canonical
report with the volatile fields (generated_at, report_digest) removed,
so reruns with identical flags produce an identical digest.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import DEFAULT_SAMPLE_CAP, calibrate, quantize_model
from .costmodel import MSP430_PROFILE, division_call_cycles, load_profile, price
from .divapprox import (
    DivMethod,
    ZERO_EXPONENT,
    approx_ratio_bitmask,
    approx_ratio_bitmask_vector,
    exponent_bitshift,
    exponent_treesearch,
)
from .errors import DataError, MacskipError, UsageError
from .kernels import MacStats, PruneConfig, RunMode
from .modelio import apply_magnitude_pruning, load_idx, load_model, save_model
from .trainer import TrainConfig, build_arch, evaluate, train

SCHEMA_VERSION = 1

_TRAIN_IMAGE_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
_TRAIN_LABEL_NAMES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")
_TEST_IMAGE_NAMES = ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte",
                     "test-images-idx3-ubyte", "test-images.idx3-ubyte")
_TEST_LABEL_NAMES = ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte",
                     "test-labels-idx1-ubyte", "test-labels.idx1-ubyte")


def _find_pair(data_dir: Path, image_names, label_names, what: str) -> tuple[Path, Path]:
    images = next((data_dir / n for n in image_names if (data_dir / n).is_file()), None)
    labels = next((data_dir / n for n in label_names if (data_dir / n).is_file()), None)
    if images is None or labels is None:
        raise UsageError(f"dataset not found: no {what} IDX pair under {data_dir}")
    return images, labels


def _resolve_data_dir(value: str | None) -> Path:
    value = value or os.environ.get("UNIT_DATA_DIR")
    if not value:
        raise UsageError("dataset not found: pass --data DIR or set UNIT_DATA_DIR")
    path = Path(value)
    if not path.is_dir():
        raise UsageError(f"dataset not found: {path} is not a directory")
    return path


def _load_split(data_dir: Path, split: str, limit: int | None):
    if split == "train":
        ip, lp = _find_pair(data_dir, _TRAIN_IMAGE_NAMES, _TRAIN_LABEL_NAMES, "training")
    else:
        ip, lp = _find_pair(data_dir, _TEST_IMAGE_NAMES, _TEST_LABEL_NAMES, "test")
    images, labels = load_idx(ip, lp)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return images, labels


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode()


def finish_report(doc: dict) -> dict:
    """Stamp schema/tool/time fields and the volatile-free digest."""
    doc["schema_version"] = SCHEMA_VERSION
    doc["tool"] = {"name": "macskip", "version": __version__}
    hashed = {k: v for k, v in doc.items() if k not in ("generated_at", "report_digest")}
    doc["report_digest"] = hashlib.sha256(_canonical(hashed)).hexdigest()
    doc["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return doc


def _write_report(doc: dict, path: str | None) -> None:
    if path:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _stats_entry(name: str, kind: str, stats: MacStats, cycles: int) -> dict:
    entry = {"name": name, "kind": kind, "cycles": cycles}
    entry.update(stats.as_dict())
    return entry


def cmd_train(args) -> int:
    data_dir = _resolve_data_dir(args.data)
    x_train, y_train = _load_split(data_dir, "train", args.limit)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed,
                      momentum=args.momentum)
    model = build_arch(args.arch)
    if args.epochs == 0:
        print("warning: --epochs 0 saves an initialized, untrained model")
    model = train(model, (x_train, y_train), cfg, log=print)
    train_acc = evaluate(model, x_train[:10000], y_train[:10000]).accuracy
    line = f"train accuracy {train_acc:.4f}"
    try:
        x_test, y_test = _load_split(data_dir, "test", None)
        test_acc = evaluate(model, x_test, y_test).accuracy
        line += f", test accuracy {test_acc:.4f}"
    except UsageError:
        pass  # no test split present
    save_model(model, args.out)
    print(line)
    print(f"model written to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    if not 0.0 <= args.percentile <= 100.0:
        raise UsageError(f"--percentile must be in [0, 100], got {args.percentile}")
    model = load_model(args.model)
    if model.is_fixed:
        raise UsageError("model is already quantized; calibrate the float model")
    data_dir = _resolve_data_dir(args.data)
    images, _ = _load_split(data_dir, "train", None)
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    rng = np.random.default_rng(args.seed)
    pick = rng.choice(images.shape[0], size=min(args.samples, images.shape[0]),
                      replace=False)
    table = calibrate(model, images[np.sort(pick)], args.percentile,
                      sample_cap=args.sample_cap, groups=args.groups,
                      seed=args.seed)
    fixed = quantize_model(model, table)
    save_model(fixed, args.out)
    print(f"calibrated at p={args.percentile:g} over {len(pick)} samples "
          f"(cap {args.sample_cap}/group, groups {args.groups}, seed {args.seed})")
    for idx, entry in sorted(table.layers.items()):
        name = model.layers[idx].name or f"layer{idx}"
        ts = ", ".join(f"{t:.6g}" for t in entry.thresholds)
        print(f"  {name}: T = [{ts}]  (n={entry.sample_count}, "
              f"|out|max {entry.act_max_abs:.4g})")
    print(f"quantized model written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    mode = RunMode.from_name(args.mode)
    div = DivMethod.from_name(args.div)
    model = load_model(args.model)
    if args.sparsity > 0.0:
        if mode is not RunMode.TTP:
            raise UsageError("--sparsity applies to mode=ttp")
        model = apply_magnitude_pruning(model, args.sparsity)
    data_dir = _resolve_data_dir(args.data)
    images, labels = _load_split(data_dir, "test", args.limit)
    profile = load_profile(args.profile)
    cfg = PruneConfig(enabled=mode.uses_thresholds, div_method=div,
                      initial_shift=args.shift_init)
    result = evaluate(model, images, labels, mode=mode, cfg=cfg,
                      fatrelu_threshold=args.fatrelu_threshold,
                      profile=profile, threads=args.threads)

    layers_out = []
    for layer, stats in zip(model.layers, result.per_layer):
        cyc, _ = price(stats, div, profile)
        layers_out.append(_stats_entry(layer.name or layer.kind.value,
                                       layer.kind.value, stats, cyc))
    skip_fraction = (result.total.macs_skipped / result.total.macs_total
                     if result.total.macs_total else 0.0)
    doc = {
        "command": "eval",
        "config": {
            "mode": mode.value,
            "div_method": div.value,
            "initial_shift": args.shift_init,
            "fatrelu_threshold": args.fatrelu_threshold,
            "sparsity": args.sparsity,
            "threads": args.threads,
            "seed": args.seed,
            "limit": args.limit,
            "profile": asdict(profile),
            "model_file": Path(args.model).name,
        },
        "dataset": {"samples": result.samples},
        "model": {
            "qformat": model.qformat.label if model.is_fixed else "float32",
            "input_scale": model.input_scale,
            "layers": [
                {
                    "name": l.name or l.kind.value,
                    "kind": l.kind.value,
                    "shape": list(l.weights.shape.dims) if l.is_mac else None,
                    "weight_scale": l.weights.scale if l.is_mac else None,
                    "out_scale": l.out_scale if l.is_mac else None,
                    "percentile": l.percentile if l.is_mac else None,
                    "thresholds": (list(map(float, l.thresholds))
                                   if l.is_mac and l.thresholds is not None else None),
                }
                for l in model.layers
            ],
        },
        "metrics": {
            "accuracy": result.accuracy,
            "baseline_accuracy": args.baseline_acc,
            "accuracy_drop": (None if args.baseline_acc is None
                              else args.baseline_acc - result.accuracy),
        },
        "layers": layers_out,
        "totals": {
            **result.total.as_dict(),
            "cycles": result.cycles,
            "energy_j": result.energy,
            "skip_fraction": skip_fraction,
            "load_threshold_precomputations":
                result.load_stats.threshold_precomputations,
        },
        "notes": "cycle/energy figures price compute only (no data movement)",
    }
    doc = finish_report(doc)
    _write_report(doc, args.report)

    print(f"mode {mode.value} (div {div.value}) on {result.samples} samples")
    print(f"  accuracy        {result.accuracy:.4f}"
          + (f"  (drop {args.baseline_acc - result.accuracy:+.4f} vs baseline "
             f"{args.baseline_acc:.4f})" if args.baseline_acc is not None else ""))
    print(f"  macs            {result.total.macs_executed:,} executed / "
          f"{result.total.macs_total:,} total ({skip_fraction:.1%} skipped)")
    print(f"  comparisons     {result.total.comparisons:,}")
    print(f"  divisions       {result.total.divisions:,} runtime, "
          f"{result.load_stats.threshold_precomputations:,} precomputed at load")
    print(f"  compute cycles  {result.cycles:,}  (~{result.energy * 1e3:.3f} mJ modeled)")
    if args.report:
        print(f"report written to {args.report}")
    return 0


def _bench_shift(samples: int, shift_init: int) -> dict:
    max_shifts = 0
    violations = 0
    for raw in range(1 << 16):
        est = exponent_bitshift(raw, shift_init)
        max_shifts = max(max_shifts, est.shifts)
        if raw and shift_init == 0 and not (1 << (est.n - 1)) <= raw < (1 << est.n):
            violations += 1
        if raw == 0 and est.n != ZERO_EXPONENT:
            violations += 1
    return {"method": "shift", "values_swept": 1 << 16, "max_shifts": max_shifts,
            "bracketing_violations": violations, "initial_shift": shift_init}


def _bench_tree() -> dict:
    depths = set()
    agree = True
    for raw in range(1 << 16):
        est = exponent_treesearch(raw)
        if raw:
            depths.add(est.comparisons)
            agree &= est.n == exponent_bitshift(raw).n
    return {"method": "tree", "values_swept": 1 << 16,
            "comparisons_per_call": sorted(depths),
            "agrees_with_bitshift": bool(agree)}


def _bench_mask(samples: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    chunk = 1024
    n_x = -(-samples // chunk)
    x = np.ldexp(rng.uniform(1.0, 2.0, n_x), rng.integers(-30, 31, n_x))
    t = np.ldexp(rng.uniform(1.0, 2.0, samples),
                 rng.integers(-30, 31, samples)).astype(np.float32)
    parts_a, parts_e = [], []
    for i, xv in zip(range(0, samples, chunk), x):
        ts = t[i:i + chunk]
        parts_a.append(approx_ratio_bitmask_vector(float(xv), ts).astype(np.float64))
        parts_e.append(float(xv) / ts.astype(np.float64))
    ratio = np.concatenate(parts_a) / np.concatenate(parts_e)
    # spot-check the scalar path against the vector path on a prefix
    n_spot = min(2048, samples)
    scalar = np.array([approx_ratio_bitmask(float(x[0]), float(tv))
                       for tv in t[:n_spot]])
    spot_ok = bool(np.array_equal(
        scalar, approx_ratio_bitmask_vector(float(x[0]), t[:n_spot]).astype(np.float64)))
    buckets = np.array([0.5, 1 / np.sqrt(2.0), 1.0, np.sqrt(2.0), 2.0])
    hist, _ = np.histogram(ratio, bins=buckets)
    return {"method": "mask", "pairs": int(ratio.size),
            "ratio_min": float(ratio.min()),
            "ratio_max": float(ratio.max()),
            "violations": int(((ratio <= 0.5) | (ratio >= 2.0)).sum()),
            "scalar_matches_vector": spot_ok,
            "histogram_bounds": [float(b) for b in buckets],
            "histogram_counts": [int(c) for c in hist]}


def cmd_bench_div(args) -> int:
    profile = load_profile(args.profile)
    methods = ([args.method] if args.method != "all"
               else ["exact", "shift", "tree", "mask"])
    results = []
    for name in methods:
        if name == "shift":
            entry = _bench_shift(args.samples, args.shift_init)
            entry["avg_shift_cycles"] = profile.c_shift * entry["max_shifts"]
        elif name == "tree":
            entry = _bench_tree()
        elif name == "mask":
            entry = _bench_mask(args.samples, args.seed)
        else:
            entry = {"method": "exact", "note": "full-precision reference division"}
        entry["per_call_cycles"] = division_call_cycles(DivMethod.from_name(name),
                                                        profile)
        results.append(entry)
        pretty = ", ".join(f"{k}={v}" for k, v in entry.items() if k != "method")
        print(f"{name}: {pretty}")
    doc = finish_report({"command": "bench-div",
                         "config": {"samples": args.samples, "seed": args.seed,
                                    "shift_init": args.shift_init,
                                    "profile": asdict(profile)},
                         "results": results})
    _write_report(doc, args.report)
    if args.report:
        print(f"report written to {args.report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macskip",
        description="Input-aware MAC-skipping inference engine and benchmark CLI")
    parser.add_argument("--version", action="version", version=f"macskip {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the float reference model")
    p_train.add_argument("--data", help="IDX dataset dir (default: $UNIT_DATA_DIR)")
    p_train.add_argument("--arch", default="mnist")
    p_train.add_argument("--out", default="model.unit")
    p_train.add_argument("--epochs", type=int, default=3)
    p_train.add_argument("--lr", type=float, default=0.05)
    p_train.add_argument("--momentum", type=float, default=0.9)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--seed", type=int, default=42)
    p_train.add_argument("--limit", type=int, help="cap training samples")
    p_train.set_defaults(func=cmd_train)

    p_cal = sub.add_parser("calibrate",
                           help="calibrate thresholds and emit the quantized model")
    p_cal.add_argument("--model", required=True, help="trained float model")
    p_cal.add_argument("--data", help="IDX dataset dir (default: $UNIT_DATA_DIR)")
    p_cal.add_argument("--out", default="model.q.unit")
    p_cal.add_argument("--percentile", type=float, default=20.0)
    p_cal.add_argument("--groups", type=int, default=1)
    p_cal.add_argument("--samples", type=int, default=256,
                       help="calibration images drawn from the training split")
    p_cal.add_argument("--sample-cap", type=int, default=DEFAULT_SAMPLE_CAP,
                       help="max sampled products per layer/group")
    p_cal.add_argument("--seed", type=int, default=0)
    p_cal.set_defaults(func=cmd_calibrate)

    p_eval = sub.add_parser("eval", help="evaluate a model and emit a report")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", help="IDX dataset dir (default: $UNIT_DATA_DIR)")
    p_eval.add_argument("--mode", default="dense",
                        choices=[m.value for m in RunMode])
    p_eval.add_argument("--div", default="exact",
                        choices=[m.value for m in DivMethod])
    p_eval.add_argument("--shift-init", type=int, default=0,
                        help="initial shift of the bit-shift estimator")
    p_eval.add_argument("--fatrelu-threshold", type=float, default=0.0)
    p_eval.add_argument("--sparsity", type=float, default=0.0,
                        help="global magnitude pruning fraction for mode=ttp")
    p_eval.add_argument("--baseline-acc", type=float,
                        help="dense accuracy to report the drop against")
    p_eval.add_argument("--limit", type=int, help="cap evaluation samples")
    p_eval.add_argument("--threads", type=int, default=1)
    p_eval.add_argument("--profile", default="msp430",
                        help="cost profile name or JSON file")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--report", help="write the JSON report here")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench-div", help="micro-benchmark the divider surrogates")
    p_bench.add_argument("--method", default="all",
                         choices=["all", "exact", "shift", "tree", "mask"])
    p_bench.add_argument("--samples", type=int, default=1_000_000)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--shift-init", type=int, default=0)
    p_bench.add_argument("--profile", default="msp430")
    p_bench.add_argument("--report", help="write the JSON report here")
    p_bench.set_defaults(func=cmd_bench_div)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except MacskipError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
