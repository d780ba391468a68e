"""Operator entry points: data generation, training, evaluation, inference,
gradient checking, and CPU benchmarking.

One binary, six subcommands. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error. Run configs are JSON documents that are
validated in full (unknown keys rejected) before any work starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gradcheck_mod
from .augment import AugmentConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataio import load_cases, read_volume, write_overlay, write_volume
from .errors import ConfigError, MyosegError
from .model import NetworkConfig, build_unet, expand_nn, forward, \
    predict_mask, shrink_mean
from .optim import TrainPlan, case_slices, evaluate, init_adam, split_cases, \
    train_epoch
from .phantom import PhantomConfig, generate_dataset, generate_phantom
from .tensor import RngStream, derive_stream


def _resolve_threads(arg_threads, config_threads=None) -> int:
    if arg_threads is not None:
        return int(arg_threads)
    if config_threads is not None:
        return int(config_threads)
    env = os.environ.get("MYOSEG_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# run configuration

RUN_CONFIG_KEYS = {"network", "train", "data", "out_dir", "threads"}
DATA_KEYS = {"manifest", "train_manifest", "val_manifest"}


def load_run_config(path) -> dict:
    """Parse and validate a full run config; raises ConfigError on any defect."""
    p = _require_file(path, "config file")
    try:
        with open(p, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{p}: unknown config keys: {sorted(unknown)}")
    for key in ("network", "train", "data", "out_dir"):
        if key not in doc:
            raise ConfigError(f"{p}: missing required key {key!r}")
    network = NetworkConfig.from_dict(doc["network"])
    plan = TrainPlan.from_dict(doc["train"])
    data = doc["data"]
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: 'data' must be an object")
    unknown = set(data) - DATA_KEYS
    if unknown:
        raise ConfigError(f"{p}: unknown data keys: {sorted(unknown)}")
    if "manifest" in data:
        if "train_manifest" in data or "val_manifest" in data:
            raise ConfigError(
                f"{p}: give either 'manifest' or the explicit "
                f"train/val manifest pair, not both")
    elif not ("train_manifest" in data and "val_manifest" in data):
        raise ConfigError(
            f"{p}: 'data' needs 'manifest' or both 'train_manifest' "
            f"and 'val_manifest'")
    return {"network": network, "train": plan, "data": data,
            "out_dir": Path(doc["out_dir"]),
            "threads": doc.get("threads")}


def _check_case_sizes(cases, config: NetworkConfig, what: str) -> None:
    h, w = config.input_size
    for case in cases:
        if case.images.shape[1:] != (h, w):
            raise ConfigError(
                f"{what} case {case.case_id} has slices of size "
                f"{case.images.shape[1:]}, network expects {(h, w)}")


def _epoch_line(report: dict) -> str:
    ordered = {k: report[k] for k in ("epoch", "mean_loss", "val_dice",
                                      "val_mse", "val_mae", "wall_seconds")}
    return json.dumps(ordered)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    config = PhantomConfig(image_size=args.size, slices_per_case=args.slices)
    manifest = generate_dataset(args.cases, args.seed, args.out, config)
    print(f"wrote {args.cases} cases ({args.cases * args.slices} slices) "
          f"-> {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    network_config: NetworkConfig = cfg["network"]
    plan: TrainPlan = cfg["train"]
    if args.no_bn:
        network_config.use_batchnorm = False
    if args.no_residual:
        network_config.use_residual = False
    if args.loss:
        network_config.loss = args.loss
    network_config.validate()
    threads = _resolve_threads(args.threads, cfg["threads"])

    data = cfg["data"]
    if "manifest" in data:
        cases = load_cases(_require_file(data["manifest"], "manifest"))
        train_cases, val_cases = split_cases(cases, plan.val_fraction,
                                             plan.seed)
    else:
        train_cases = load_cases(_require_file(data["train_manifest"],
                                               "train manifest"))
        val_cases = load_cases(_require_file(data["val_manifest"],
                                             "val manifest"))
    _check_case_sizes(train_cases, network_config, "training")
    if val_cases:
        _check_case_sizes(val_cases, network_config, "validation")
    train_slices = case_slices(train_cases)

    if args.resume:
        ckpt = load_checkpoint(_require_file(args.resume, "checkpoint"))
        if ckpt.config.to_dict() != network_config.to_dict():
            raise ConfigError(
                "checkpoint configuration does not match the run config")
        net, adam, start_epoch = ckpt.network, ckpt.adam, ckpt.epoch
        if adam is None:
            adam = init_adam(net.named_params())
    else:
        net = build_unet(network_config, RngStream(plan.seed))
        adam = init_adam(net.named_params())
        start_epoch = 0

    out_dir = cfg["out_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "run_log.jsonl"
    log_mode = "a" if args.resume else "w"

    with threadpool_limits(limits=threads):
        with open(log_path, log_mode, encoding="utf-8") as log:
            for epoch in range(start_epoch, plan.epochs):
                report = train_epoch(net, train_slices, val_cases, plan,
                                     adam, epoch)
                log.write(_epoch_line(report) + "\n")
                log.flush()
                done = epoch + 1
                if done % plan.checkpoint_every == 0 or done == plan.epochs:
                    save_checkpoint(out_dir / f"checkpoint_epoch{done:04d}.myoseg",
                                    net, adam, done, plan.seed)
                if args.verbose:
                    print(_epoch_line(report))
    save_checkpoint(out_dir / "checkpoint_final.myoseg", net, adam,
                    plan.epochs, plan.seed)
    print(f"trained {plan.epochs - start_epoch} epochs -> {out_dir}")
    return 0


def _format_metric_table(rows: list[dict], agg: dict) -> str:
    lines = [f"{'case':<16}{'Dice':<26}{'MSE':<26}{'MAE':<26}"]
    for r in rows:
        lines.append(f"{r['case_id']:<16}{r['dice']!r:<26}"
                     f"{r['mse']!r:<26}{r['mae']!r:<26}")
    lines.append(f"{'mean':<16}{agg['dice_mean']!r:<26}"
                 f"{agg['mse_mean']!r:<26}{agg['mae_mean']!r:<26}")
    lines.append(f"{'std':<16}{agg['dice_std']!r:<26}"
                 f"{agg['mse_std']!r:<26}{agg['mae_std']!r:<26}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cases = load_cases(_require_file(args.manifest, "manifest"))
    _check_case_sizes(cases, ckpt.config, "evaluation")
    threads = _resolve_threads(args.threads)
    with threadpool_limits(limits=threads):
        rows, agg = evaluate(ckpt.network, cases, per_slice=args.per_slice)
    table = _format_metric_table(rows, agg)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump({"rows": rows, "aggregate": agg}, fh, indent=2)
            fh.write("\n")
        with open(out / "metrics.txt", "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    volume, header = read_volume(_require_file(args.volume, "volume"))
    config = ckpt.config
    h, w = config.input_size
    if volume.shape[1:] != (h, w):
        raise ConfigError(
            f"volume slices are {volume.shape[1:]}, network expects {(h, w)}")
    truth = None
    if args.masks:
        truth, _ = read_volume(_require_file(args.masks, "mask volume"))
        if truth.shape != volume.shape:
            raise ConfigError("mask volume shape does not match the volume")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = _resolve_threads(args.threads)

    images = volume.astype(np.float32)
    sf = config.shrink_factor
    t0 = time.perf_counter()
    with threadpool_limits(limits=threads):
        prob_slices = []
        for i in range(images.shape[0]):
            x = shrink_mean(images[i][None, None], sf)
            p, _ = forward(ckpt.network, x, "infer")
            prob_slices.append(expand_nn(p, sf)[0])
    elapsed = time.perf_counter() - t0
    probs = np.stack(prob_slices).astype(np.float32)
    masks = predict_mask(probs, args.threshold).astype(np.uint8)

    write_volume(out_dir / "probs.myovol", probs, spacing=header.spacing)
    write_volume(out_dir / "mask.myovol", masks, spacing=header.spacing)
    for i in range(images.shape[0]):
        ref = truth[i] if truth is not None else masks[i]
        write_overlay(out_dir / f"overlay_{i:03d}.ppm",
                      np.clip(images[i], 0.0, 1.0), ref, masks[i])
    print(f"inferred {images.shape[0]} slices in {elapsed:.3f}s "
          f"({elapsed / images.shape[0]:.3f}s/slice) -> {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    results, report = gradcheck_mod.run_and_report(args.size)
    print(report)
    return 0 if all(r.passed for r in results) else 1


def _machine_info() -> dict:
    info = {"cpu_count": os.cpu_count()}
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.lower().startswith("model name") and "model" not in info:
                    info["model"] = line.split(":", 1)[1].strip()
                if line.lower().startswith("cpu mhz") and "mhz" not in info:
                    info["mhz"] = float(line.split(":", 1)[1])
    except OSError:
        pass
    return info


BENCH_BUDGET_SECONDS = 22.0


def _timed_inference(net, volume: np.ndarray) -> float:
    sf = net.config.shrink_factor
    t0 = time.perf_counter()
    for i in range(volume.shape[0]):
        x = shrink_mean(volume[i][None, None], sf)
        forward(net, x, "infer")
    return time.perf_counter() - t0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    config = ckpt.config
    if config.levels != 5 or config.base_features != 64:
        raise ConfigError(
            f"bench needs the full-size network (levels=5, base_features=64); "
            f"checkpoint has levels={config.levels}, "
            f"base_features={config.base_features}")
    h, w = config.input_size
    pconf = PhantomConfig(image_size=h)
    slices = [generate_phantom(derive_stream(20260401, i), pconf)[0]
              for i in range(args.slices)]
    volume = np.stack(slices)
    threads = _resolve_threads(args.threads)

    report = {"machine": _machine_info(), "volume": list(volume.shape),
              "repeats": args.repeats, "budget_seconds": BENCH_BUDGET_SECONDS}
    for label, limit in (("single_thread", 1), ("multi_thread", threads)):
        with threadpool_limits(limits=limit):
            _timed_inference(ckpt.network, volume[:1])  # warm-up
            runs = [_timed_inference(ckpt.network, volume)
                    for _ in range(args.repeats)]
        median = float(np.median(runs))
        report[label] = {
            "threads": limit,
            "runs_seconds": runs,
            "median_total_seconds": median,
            "median_per_slice_seconds": median / volume.shape[0],
        }
    report["within_budget"] = \
        report["single_thread"]["median_total_seconds"] < BENCH_BUDGET_SECONDS

    print(f"volume {volume.shape[0]}x{h}x{w}, {args.repeats} repeats")
    for label in ("single_thread", "multi_thread"):
        r = report[label]
        print(f"{label}: median {r['median_total_seconds']:.3f}s total, "
              f"{r['median_per_slice_seconds']:.3f}s/slice "
              f"({r['threads']} thread(s))")
    verdict = "PASS" if report["within_budget"] else "FAIL"
    print(f"single-thread budget {BENCH_BUDGET_SECONDS:.0f}s: {verdict}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="myoseg",
        description="Trainable segmentation engine for annular structures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, default=13)
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-bn", action="store_true",
                   help="disable batch normalization")
    p.add_argument("--no-residual", action="store_true",
                   help="disable residual shortcuts")
    p.add_argument("--loss", choices=("jaccard", "dice"))
    p.add_argument("--threads", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--per-slice", action="store_true",
                   help="Dice as the mean of per-slice values")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment a volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--masks", help="optional truth volume for overlays")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--size", choices=("small", "tiny"), default="small")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="CPU inference timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slices", type=int, default=13)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MyosegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
