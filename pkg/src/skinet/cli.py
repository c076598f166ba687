"""``skinet`` command line: train-seg, train-clf, infer, evaluate, explain, xai-bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointError,
    atomic_write_bytes,
    atomic_write_text,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from .classifier import build_classifier, train_classifier
from .config import ConfigError, RunConfig, build_run_config, read_config_file
from .core import TriageCounts, ValidationError, subseed
from .data import (
    IMAGE_SUFFIXES,
    DatasetManifest,
    decode_image,
    load_arrays,
    load_dataset,
    preprocess,
    split,
)
from .pipeline import evaluate_pipeline, masked_inputs, skinet_infer, summarize_counts
from .render import save_heatmap, save_mask_overlay, save_overlay, save_posterior_chart, save_uncertainty_map
from .saliency import explain
from .segnet import build_segnet, evaluate_segmenter, train_segnet
from .xai_eval import evaluate_explainer

log = logging.getLogger("skinet")

COMMANDS = ("train-seg", "train-clf", "infer", "evaluate", "explain", "xai-bench")
EXPLAINER_FLAGS = {"gb": "guided_backprop", "gradcam": "grad_cam", "ggc": "guided_grad_cam", "xrai": "xrai"}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skinet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"skinet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat 'section.key = value' config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="dataset root")
        p.add_argument("--val-data", help="separate validation dataset root")
        p.add_argument("--input", action="append", dest="inputs", help="input image (repeatable)")
        p.add_argument("--seg-checkpoint", action="append", dest="seg_checkpoints")
        p.add_argument("--clf-checkpoint")
        p.add_argument("--threshold-seg", type=float)
        p.add_argument("--threshold-clf", type=float)
        p.add_argument("--samples", type=int, help="Monte Carlo sample count M")
        p.add_argument("--explainer", choices=sorted(EXPLAINER_FLAGS))
        p.add_argument("--fraction", type=float, help="keep fraction for explanation masks")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set seg.base_W=8")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            p.add_argument("--task", choices=("pipeline", "seg"))
            p.add_argument("--replay-counts", help="JSON file of named cc/cu/ic/iu count sets")
    return parser


def resolve_config(args) -> RunConfig:
    from .config import parse_value

    values = read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "--set expects KEY=VALUE")
        k, v = item.split("=", 1)
        values[k.strip()] = parse_value(v)
    flags = {
        "run.seed": args.seed,
        "run.out": args.out,
        "run.data": args.data,
        "run.val_data": args.val_data,
        "run.inputs": args.inputs,
        "run.seg_checkpoints": args.seg_checkpoints,
        "run.clf_checkpoint": args.clf_checkpoint,
        "pipeline.seg_threshold": args.threshold_seg,
        "pipeline.clf_threshold": args.threshold_clf,
        "pipeline.samples": args.samples,
        "pipeline.explainer": EXPLAINER_FLAGS.get(args.explainer) if args.explainer else None,
        "run.fraction": args.fraction,
        "run.task": getattr(args, "task", None),
        "run.replay_counts": getattr(args, "replay_counts", None),
    }
    for k, v in flags.items():
        if v is not None:
            values[k] = v
    return build_run_config(values)


# --------------------------------------------------------------------------- helpers


def _cached_arrays(manifest: DatasetManifest, size: int):
    """load_arrays with an optional on-disk cache under $SKINET_CACHE."""
    cache = os.environ.get("SKINET_CACHE")
    if not cache:
        return load_arrays(manifest, size)
    h = hashlib.sha256(f"{manifest.kind}:{size}".encode())
    for e in manifest.entries:
        st = e.image.stat()
        h.update(f"{e.image}:{st.st_size}:{st.st_mtime_ns}:{e.target}".encode())
    path = Path(cache) / f"{h.hexdigest()[:32]}.npz"
    if path.is_file():
        with np.load(path) as z:
            return z["images"], z["targets"]
    images, targets = load_arrays(manifest, size)
    buf = io.BytesIO()
    np.savez(buf, images=images, targets=targets)
    atomic_write_bytes(path, buf.getvalue())
    return images, targets


def _require(value, flag: str):
    if not value:
        raise UsageError(f"{flag} is required for this command")
    return value


def _train_val(cfg: RunConfig, kind: str, size: int):
    root = _require(cfg.run.data, "--data")
    manifest = load_dataset(root, kind)
    if cfg.run.val_data:
        train_m, val_m, test_m = manifest, load_dataset(cfg.run.val_data, kind), None
    else:
        train_m, val_m, test_m = split(manifest, cfg.run.split, subseed(cfg.run.seed, "split"))
        if len(val_m) == 0:
            val_m = train_m
    arrays = [_cached_arrays(m, size) if m is not None and len(m) else None for m in (train_m, val_m, test_m)]
    return arrays


def _write_history(path: Path, history) -> None:
    buf = io.StringIO()
    if history.records:
        writer = csv.DictWriter(buf, fieldnames=list(history.records[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(history.records)
    atomic_write_text(path, buf.getvalue())


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path, what: str):
    if not path:
        raise UsageError(f"--{what}-checkpoint is required for this command")
    return load_checkpoint(path)


def _input_paths(cfg: RunConfig) -> list[Path]:
    paths = [Path(p) for p in cfg.run.inputs]
    if not paths and cfg.run.data:
        root = Path(cfg.run.data)
        folder = root / "images" if (root / "images").is_dir() else root
        paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise UsageError("no inputs: pass --input or --data")
    return paths


# --------------------------------------------------------------------------- commands


def cmd_train_seg(cfg: RunConfig, out: Path) -> dict:
    size = cfg.seg.input_shape[0]
    train, val, test = _train_val(cfg, "segmentation", size)
    model = build_segnet(cfg.seg)
    model, history = train_segnet(model, train, val, cfg.seg_train, subseed(cfg.run.seed, "train"))
    ckpt = save_checkpoint(model, out / "checkpoint")
    _write_history(out / "history.csv", history)
    metrics = {"best_epoch": history.best_epoch, "best_val_dice": history.best_value}
    if test is not None:
        m = evaluate_segmenter(model, *test)
        metrics.update({"test_dice": m.dice, "test_jaccard": m.jaccard})
    _write_json(out / "metrics.json", metrics)
    return {"checkpoints": {"seg": checkpoint_hash(ckpt)}}


def cmd_train_clf(cfg: RunConfig, out: Path) -> dict:
    size = cfg.clf.input_shape[0]
    train, val, test = _train_val(cfg, "classification", size)
    if cfg.run.train_on_masked:
        # train on the segmenter's masked crops instead of the original images
        if not cfg.run.seg_checkpoints:
            raise UsageError("run.train_on_masked needs --seg-checkpoint")
        seg = load_checkpoint(cfg.run.seg_checkpoints[0])
        train, val, test = [
            None if part is None else (masked_inputs(seg, part[0], cfg.pipeline, size), part[1])
            for part in (train, val, test)
        ]
    model = build_classifier(cfg.clf)
    model, history = train_classifier(
        model, train, val, cfg.clf_train, cfg.aug, subseed(cfg.run.seed, "train"), cfg.run.balance
    )
    ckpt = save_checkpoint(model, out / "checkpoint")
    _write_history(out / "history.csv", history)
    metrics = {"best_epoch": history.best_epoch, "best_val_accuracy": history.best_value}
    if test is not None:
        from .classifier import predict_labels

        metrics["test_accuracy"] = float((predict_labels(model, test[0]) == test[1]).mean())
    _write_json(out / "metrics.json", metrics)
    hashes = _hashes(cfg) if cfg.run.train_on_masked else {}
    return {"checkpoints": {**hashes, "clf": checkpoint_hash(ckpt)}}


def _hashes(cfg: RunConfig) -> dict:
    out = {f"seg{i}": checkpoint_hash(p) for i, p in enumerate(cfg.run.seg_checkpoints)}
    if cfg.run.clf_checkpoint:
        out["clf"] = checkpoint_hash(cfg.run.clf_checkpoint)
    return out


def cmd_infer(cfg: RunConfig, out: Path) -> dict:
    seg = _load(cfg.run.seg_checkpoints[0] if cfg.run.seg_checkpoints else None, "seg")
    clf = _load(cfg.run.clf_checkpoint, "clf")
    for i, path in enumerate(_input_paths(cfg)):
        raw = decode_image(path)
        report = skinet_infer(seg, clf, raw, cfg.pipeline, subseed(cfg.run.seed, f"item{i}"), path.name,
                              cfg.aug, cfg.xrai)
        d = out / "reports" / path.stem
        _write_json(d / "report.json", report.to_dict())
        _write_json(d / "timings.json", report.timings)
        seg_img = preprocess(raw, seg.cfg.input_shape[0]).pixels
        save_mask_overlay(seg_img, report.seg_mask.pixels, d / "mask_overlay.png")
        save_uncertainty_map(report.seg_uncertainty.pixel_entropy_map, d / "uncertainty.png")
        probs = report.clf.mean.probs
        save_posterior_chart(probs, report.clf.mean.class_labels, d / "posterior.png", report.clf.predicted_index)
        if report.saliency is not None:
            save_overlay(report.routed_input.pixels, report.saliency.scores(), d / "saliency_overlay.png")
            save_heatmap(report.saliency.scores(), d / "saliency.png")
            np.save(d / "saliency.npy", report.saliency.values)
        log.info("%s: %s (%s)", path.name, report.clf.predicted_class, report.verdict)
    return {"checkpoints": _hashes(cfg)}


def format_percent(x: float) -> str:
    """Percentage truncated (not rounded) to two decimals: 0.736565 -> '73.65%'."""
    return f"{math.floor(x * 10000 + 1e-9) / 100:.2f}%"


def _format_summary(columns: dict) -> str:
    rows = [("Correct Certain (cc)", "cc"), ("Correct Uncertain (cu)", "cu"),
            ("Incorrect Certain (ic)", "ic"), ("Incorrect Uncertain (iu)", "iu")]
    names = list(columns)
    width = max(len(n) for n in names + ["Category"]) + 2
    lines = ["Category".ljust(26) + "".join(n.rjust(width) for n in names)]
    for label, key in rows:
        lines.append(label.ljust(26) + "".join(str(columns[n][key]).rjust(width) for n in names))
    lines.append("Diagnostic accuracy".ljust(26)
                 + "".join(format_percent(columns[n]['diagnostic_accuracy']).rjust(width) for n in names))
    lines.append("Prediction accuracy".ljust(26)
                 + "".join(format_percent(columns[n]['prediction_accuracy']).rjust(width) for n in names))
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    if cfg.run.replay_counts:
        sets = json.loads(Path(cfg.run.replay_counts).read_text())
        columns = {name: summarize_counts(TriageCounts(**c)) for name, c in sets.items()}
        _write_json(out / "counts.json", columns)
        summary = _format_summary(columns)
        atomic_write_text(out / "summary.txt", summary)
        print(summary, end="")
        return {}
    if cfg.run.task == "seg":
        return _evaluate_segmenters(cfg, out)
    seg = _load(cfg.run.seg_checkpoints[0] if cfg.run.seg_checkpoints else None, "seg")
    clf = _load(cfg.run.clf_checkpoint, "clf")
    manifest = load_dataset(_require(cfg.run.data, "--data"), "classification")
    columns, records = {}, {}
    runs = [("SkiNet", seg)] + ([("Stand-alone", None)] if cfg.run.standalone else [])
    for name, seg_model in runs:
        result = evaluate_pipeline(seg_model, clf, manifest, cfg.pipeline, cfg.run.seed, cfg.aug)
        columns[name] = summarize_counts(result.counts)
        records[name] = result.records
    _write_json(out / "counts.json", columns)
    _write_json(out / "records.json", records)
    summary = _format_summary(columns)
    atomic_write_text(out / "summary.txt", summary)
    print(summary, end="")
    return {"checkpoints": _hashes(cfg)}


def _evaluate_segmenters(cfg: RunConfig, out: Path) -> dict:
    if not cfg.run.seg_checkpoints:
        raise UsageError("--seg-checkpoint is required for --task seg")
    manifest = load_dataset(_require(cfg.run.data, "--data"), "segmentation")
    table = {}
    for path in cfg.run.seg_checkpoints:
        model = load_checkpoint(path)
        images, masks = _cached_arrays(manifest, model.cfg.input_shape[0])
        m = evaluate_segmenter(model, images, masks, cfg.pipeline.mask_threshold)
        table[model.cfg.architecture + ":" + Path(path).name] = {"dice": m.dice, "jaccard": m.jaccard}
    _write_json(out / "segmentation_metrics.json", table)
    for name, row in table.items():
        print(f"{name}\tDI {row['dice']:.4f}\tJI {row['jaccard']:.4f}")
    return {"checkpoints": _hashes(cfg)}


def cmd_explain(cfg: RunConfig, out: Path) -> dict:
    from .classifier import clf_forward
    from .saliency import top_fraction_mask

    clf = _load(cfg.run.clf_checkpoint, "clf")
    method = cfg.pipeline.explainer if cfg.pipeline.explainer != "none" else "xrai"
    for path in _input_paths(cfg):
        img = preprocess(decode_image(path), clf.cfg.input_shape[0])
        target = clf_forward(clf, img).argmax
        attr = explain(clf, img, target, method, cfg.xrai, seed=cfg.run.seed)
        d = out / "explanations" / path.stem
        save_heatmap(attr.scores(), d / f"{method}.png")
        save_overlay(img.pixels, attr.scores(), d / f"{method}_overlay.png")
        np.save(d / f"{method}.npy", attr.values)
        keep = top_fraction_mask(attr, cfg.run.fraction)
        save_mask_overlay(img.pixels, keep.pixels, d / f"{method}_top{round(cfg.run.fraction * 100)}.png")
    return {"checkpoints": _hashes(cfg)}


def cmd_xai_bench(cfg: RunConfig, out: Path) -> dict:
    clf = _load(cfg.run.clf_checkpoint, "clf")
    manifest = load_dataset(_require(cfg.run.data, "--data"), "classification")
    images, labels = _cached_arrays(manifest, clf.cfg.input_shape[0])
    ids = [e.image.name for e in manifest.entries]
    all_records, summary = [], {}
    for name in cfg.run.explainers:
        res = evaluate_explainer(clf, (images, labels, ids), name, cfg.run.fraction, cfg.bokeh, cfg.run.seed, cfg.xrai)
        all_records += res.records
        summary[name] = {"retained_accuracy": res.accuracy, "baseline_accuracy": res.baseline_accuracy}
        print(f"{name}\t{100 * res.accuracy:.2f}%")
    buf = io.StringIO()
    from .xai_eval import CSV_FIELDS

    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(all_records)
    atomic_write_text(out / "xai_bench.csv", buf.getvalue())
    _write_json(out / "xai_bench_summary.json", {"fraction": cfg.run.fraction, "explainers": summary})
    return {"checkpoints": _hashes(cfg)}


HANDLERS = {
    "train-seg": cmd_train_seg,
    "train-clf": cmd_train_clf,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "xai-bench": cmd_xai_bench,
}


def run(command: str, cfg: RunConfig) -> int:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = HANDLERS[command](cfg, out) or {}
    atomic_write_text(out / "run.cfg", cfg.to_text())
    _write_json(out / "run_manifest.json", {
        "command": command,
        "version": __version__,
        "seed": cfg.run.seed,
        "config": cfg.to_flat(),
        **extra,
    })
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"skinet: error: invalid config key {exc}", file=sys.stderr)
        return 2
    try:
        return run(args.command, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"skinet: error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ValidationError, OSError, RuntimeError) as exc:
        print(f"skinet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
