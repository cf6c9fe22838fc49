"""``mrnet`` command line: generate, convert, train, eval, gradcheck, summary.

Settings are resolved as: command-line flags, then values from ``--config``
(a run_config.json written by an earlier run), then built-in defaults.
Every run echoes its fully resolved settings to ``run_config.json`` in the
run directory.  Without ``--out`` the run directory is
``$MRNET_RUNS_DIR/<command>-<timestamp>`` (default base: ``./runs``).

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from datetime import datetime
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint_with_meta, save_checkpoint
from .data import DataError, SyntheticSpec, generate_synthetic, load_image, load_split, read_manifest
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import ComparisonRow, confusion, multiclass_auc, render_comparison, render_roc_svg, report
from .models import ARCHITECTURES, ModelSpec, build, param_count, summary
from .pds4 import LabelError, convert_product
from .training import TrainConfig, predict, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
RUNS_ENV = "MRNET_RUNS_DIR"

# reference totals from the published comparison table, shown next to ours
PUBLISHED_PARAMS = {"alexnet-mini": 28040483, "mobilenet-mini": 3242883, "vgg16-mini": 33537363,
                "mrnet": 41366179}

DEFAULTS = {
    "generate": {"classes": 3, "per_class": 100, "resolution": 64, "seed": 0,
                 "ratios": [0.7, 0.15, 0.15], "threads": 1},
    "train": {"arch": "mrnet", "scale": "1/8", "resolution": 64, "classes": None, "seed": 0,
              "epochs": 10, "batch_size": TrainConfig.batch_size, "lr": 1e-4, "reduced_lr": 1e-5,
              "lr_drop_epoch": 5, "manifest": None, "threads": 1},
    "eval": {"checkpoints": [], "manifest": None, "split": "test", "resize": False, "threads": 1},
    "convert": {"inputs": [], "threads": 1},
    "gradcheck": {"seeds": "1..5", "eps": 1e-5, "threads": 1, "corrupt": None},
    "summary": {"arch": "mrnet", "scale": "1", "resolution": 512, "classes": 3, "spec": None},
}


class UsageError(Exception):
    pass


def _seed_list(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrnet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mrnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--out", default=S, help="run directory (default: $MRNET_RUNS_DIR/<cmd>-<time>)")
        p.add_argument("--config", default=S, help="run_config.json to take settings from")
        p.add_argument("--threads", type=int, default=S, help="BLAS threads (1 = deterministic mode)")

    p = sub.add_parser("generate", help="write a synthetic texture corpus and manifest")
    common(p)
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--per-class", type=int, default=S, dest="per_class")
    p.add_argument("--resolution", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--ratios", default=S, help="train,validation,test fractions, e.g. 0.7,0.15,0.15 or 5/7,1/7,1/7")

    p = sub.add_parser("train", help="train one architecture on a manifest")
    common(p)
    p.add_argument("--arch", default=S, help=f"one of {', '.join(ARCHITECTURES)}")
    p.add_argument("--scale", default=S, help="width scale, e.g. 1 or 1/8")
    p.add_argument("--resolution", type=int, default=S)
    p.add_argument("--classes", type=int, default=S, help="default: number of classes in the manifest")
    p.add_argument("--manifest", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S, dest="batch_size")
    p.add_argument("--lr", type=float, default=S, help="initial learning rate")
    p.add_argument("--reduced-lr", type=float, default=S, dest="reduced_lr")
    p.add_argument("--lr-drop-epoch", type=int, default=S, dest="lr_drop_epoch")

    p = sub.add_parser("eval", help="comparison table and ROC figures for checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="*", default=S)
    p.add_argument("--manifest", default=S)
    p.add_argument("--split", default=S, choices=("train", "validation", "test"))
    p.add_argument("--resize", action="store_true", default=S,
                   help="rescale images to each checkpoint's resolution instead of rejecting a mismatch")

    p = sub.add_parser("convert", help="convert PDS4-lite Array_3D_Image products to PNG")
    common(p)
    p.add_argument("inputs", nargs="*", default=S, help="label files or directories of labels")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the MRNet-mini loss")
    common(p)
    p.add_argument("--seeds", "--seed", default=S, dest="seeds", help="e.g. 1..5 or 1,3")
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--corrupt", default=S, help=argparse.SUPPRESS)

    p = sub.add_parser("summary", help="layer-by-layer shapes and parameter count")
    p.add_argument("--arch", default=S)
    p.add_argument("--scale", default=S)
    p.add_argument("--resolution", type=int, default=S)
    p.add_argument("--classes", type=int, default=S)
    p.add_argument("--spec", default=S, help="JSON model spec file instead of --arch")
    p.add_argument("--config", default=S)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items() if k != "command"}
    if "config" in given:
        try:
            stored = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {given['config']}: {exc}") from None
        stored = stored.get("settings", stored)
        cfg.update({k: v for k, v in stored.items() if k in cfg})
    cfg.update({k: v for k, v in given.items() if k not in ("config", "out")})
    if "out" in given:
        cfg["out"] = given["out"]
    return cfg


def run_dir(command: str, cfg: dict) -> Path:
    if cfg.get("out"):
        path = Path(cfg["out"])
    else:
        base = Path(os.environ.get(RUNS_ENV, "runs"))
        path = base / f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S-%f')}"
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from None
    return path


def write_run_config(path: Path, command: str, cfg: dict) -> None:
    settings = {k: v for k, v in cfg.items() if k != "out"}
    doc = {"command": command, "version": __version__, "settings": settings}
    (path / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    ratios = cfg["ratios"]
    if isinstance(ratios, str):
        try:
            ratios = [float(Fraction(v.strip())) for v in ratios.split(",")]
        except (ValueError, ZeroDivisionError):
            raise UsageError(f"--ratios expects three numbers or fractions, got {ratios!r}") from None
    cfg["ratios"] = list(ratios)
    try:
        spec = SyntheticSpec(classes=cfg["classes"], per_class=cfg["per_class"], resolution=cfg["resolution"],
                             seed=cfg["seed"], ratios=tuple(ratios))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = run_dir("generate", cfg)
    manifest = generate_synthetic(spec, out)
    write_run_config(out, "generate", cfg)
    counts = manifest.counts()
    print(f"wrote {len(manifest.records)} images to {out}")
    print(f"manifest: {out / 'manifest.csv'}  train={counts['train']} "
          f"validation={counts['validation']} test={counts['test']}")
    return EXIT_OK


def _spec_from(cfg: dict, classes: int) -> ModelSpec:
    if cfg["arch"] not in ARCHITECTURES and cfg["arch"] != "mrnet-mini":
        raise UsageError(f"unknown architecture {cfg['arch']!r}; valid names: {', '.join(ARCHITECTURES)}")
    try:
        return build(cfg["arch"], classes, int(cfg["resolution"]), cfg["scale"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    if not cfg.get("manifest"):
        raise UsageError("train needs --manifest")
    manifest = read_manifest(cfg["manifest"])
    classes = cfg["classes"] if cfg["classes"] is not None else manifest.num_classes
    cfg["classes"] = classes
    spec = _spec_from(cfg, classes)
    try:
        config = TrainConfig(epochs=cfg["epochs"], initial_lr=cfg["lr"], reduced_lr=cfg["reduced_lr"],
                             lr_drop_epoch=min(cfg["lr_drop_epoch"], cfg["epochs"]),
                             batch_size=cfg["batch_size"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = run_dir("train", cfg)
    write_run_config(out, "train", cfg)
    model, reports = train(spec, manifest, config, on_epoch=lambda r: print(r.line(), flush=True))

    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_accuracy"))
        for r in reports:
            w.writerow((r.epoch, repr(r.train_loss), repr(r.val_accuracy)))
    with open(out / "epoch_times.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "seconds"))
        for r in reports:
            w.writerow((r.epoch, repr(r.seconds)))
    sec = float(np.mean([r.seconds for r in reports])) if reports else 0.0
    meta = {"arch": cfg["arch"], "seconds_per_epoch": sec, "train_config": config.to_dict()}
    save_checkpoint(model, out / "model.ckpt", meta=meta)

    test_acc = float("nan")
    if manifest.counts()["test"]:
        x, y = load_split(manifest, "test", spec.input_resolution)
        test_acc = float(np.mean(np.argmax(predict(model, x), axis=1) == y))
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"test_accuracy={test_acc:.4f}")
    return EXIT_OK


def _load_eval_split(manifest, split, resolution, resize):
    recs = manifest.subset(split)
    if not recs:
        raise UsageError(f"manifest has an empty {split} split")
    if not resize:
        for r in recs:
            shape = load_image(manifest.resolve(r)).shape
            if shape[1:] != (resolution, resolution):
                raise UsageError(f"image {r.path} is {shape[1]}x{shape[2]} but the checkpoint expects "
                                 f"{resolution}x{resolution} (pass --resize to rescale)")
    return load_split(manifest, split, resolution)


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoints"]:
        raise UsageError("eval needs at least one checkpoint")
    if not cfg.get("manifest"):
        raise UsageError("eval needs --manifest")
    manifest = read_manifest(cfg["manifest"])
    out = run_dir("eval", cfg)
    write_run_config(out, "eval", cfg)
    rows, metric_rows = [], []
    names_seen: dict[str, int] = {}
    for ckpt in cfg["checkpoints"]:
        try:
            model, meta = load_checkpoint_with_meta(ckpt)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        spec = model.spec
        if manifest.num_classes > spec.classes:
            raise UsageError(f"{ckpt}: {spec.classes}-class model but manifest has {manifest.num_classes} classes")
        x, y = _load_eval_split(manifest, cfg["split"], spec.input_resolution, cfg["resize"])
        probs = predict(model, x)
        rep = report(confusion(np.argmax(probs, axis=1), y, spec.classes))
        name = meta.get("arch", spec.name)
        if name in names_seen:
            names_seen[name] += 1
            name = f"{name}#{names_seen[name]}"
        else:
            names_seen[name] = 1
        rows.append(ComparisonRow(name, param_count(model), float(meta.get("seconds_per_epoch", 0.0)), rep))
        class_names = manifest.class_names + [f"class_{k}" for k in range(manifest.num_classes, spec.classes)]
        aucs = multiclass_auc(probs, y, class_names)
        (out / f"roc_{name.replace('#', '_')}.svg").write_text(render_roc_svg(aucs.curves, title=f"ROC of {name}"))
        metric_rows.append((name, rep, aucs))

    text, table_csv = render_comparison(rows)
    (out / "comparison.txt").write_text(text)
    (out / "comparison.csv").write_text(table_csv)
    (out / "metrics.csv").write_text(_metrics_csv(metric_rows))
    print(text, end="")
    for name, _, aucs in metric_rows:
        macro = "undefined" if aucs.macro is None else f"{aucs.macro:.4f}"
        print(f"{name}: micro AUC={aucs.micro:.4f} macro AUC={macro}")
    print(f"outputs: {out}")
    return EXIT_OK


def _metrics_csv(metric_rows) -> str:
    """Long-format, timing-free metrics; byte-identical across repeated runs."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "scope", "metric", "value"))
    for name, rep, aucs in metric_rows:
        w.writerow((name, "overall", "accuracy", repr(rep.accuracy)))
        w.writerow((name, "weighted", "precision", repr(rep.weighted_precision)))
        w.writerow((name, "weighted", "recall", repr(rep.weighted_recall)))
        w.writerow((name, "weighted", "fscore", repr(rep.weighted_fscore)))
        for k in range(len(rep.support)):
            for metric, vals in (("precision", rep.precision), ("recall", rep.recall),
                                 ("fscore", rep.fscore), ("support", rep.support)):
                w.writerow((name, f"class_{k}", metric, repr(vals[k])))
            auc = aucs.per_class[k]
            w.writerow((name, f"class_{k}", "auc", "undefined" if auc is None else repr(auc)))
        w.writerow((name, "micro", "auc", repr(aucs.micro)))
        w.writerow((name, "macro", "auc", "undefined" if aucs.macro is None else repr(aucs.macro)))
    return buf.getvalue()


def cmd_convert(cfg: dict) -> int:
    labels: list[Path] = []
    for item in cfg["inputs"]:
        p = Path(item)
        labels.extend(sorted(p.glob("*.xml")) if p.is_dir() else [p])
    out = run_dir("convert", cfg)
    write_run_config(out, "convert", cfg)
    ok, failed = 0, 0
    for label in labels:
        try:
            convert_product(label, out / f"{label.stem}.png")
            ok += 1
        except (LabelError, OSError) as exc:
            failed += 1
            print(f"error: {label}: {exc}", file=sys.stderr)
    print(f"{ok} converted, {failed} failed")
    return EXIT_USAGE if failed else EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    seeds = _seed_list(cfg["seeds"])
    if not seeds:
        raise UsageError("no seeds given")
    out = run_dir("gradcheck", cfg)
    write_run_config(out, "gradcheck", cfg)
    start = time.perf_counter()
    worst = 0.0
    lines = []
    for seed in seeds:
        for item, err in run_gradcheck(seed, eps=cfg["eps"], corrupt=cfg["corrupt"]):
            status = "PASS" if err < TOLERANCE else "FAIL"
            worst = max(worst, err)
            line = f"seed={seed} {item:<26} max_rel_err={err:.3e} {status}"
            lines.append(line)
            print(line)
    verdict = "PASS" if worst < TOLERANCE else "FAIL"
    print(f"overall {verdict}: worst max_rel_err={worst:.3e} (tolerance {TOLERANCE:g}) "
          f"in {time.perf_counter() - start:.1f}s")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if verdict == "PASS" else EXIT_FAIL


def cmd_summary(cfg: dict) -> int:
    if cfg.get("spec"):
        try:
            spec = ModelSpec.from_dict(json.loads(Path(cfg["spec"]).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot load spec {cfg['spec']}: {exc}") from None
    else:
        spec = _spec_from(cfg, int(cfg["classes"]))
    print(summary(spec))
    ref = PUBLISHED_PARAMS.get(spec.name)
    if ref is not None:
        print(f"Reference total parameters for {spec.name.replace('-mini', '')} in the published "
              f"comparison: {ref:,d} (not expected to match)")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "convert": cmd_convert,
            "gradcheck": cmd_gradcheck, "summary": cmd_summary}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(ns.command, ns)
        with threadpool_limits(limits=cfg.get("threads") or None):
            return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"mrnet {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LabelError, CheckpointError) as exc:
        print(f"mrnet {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
