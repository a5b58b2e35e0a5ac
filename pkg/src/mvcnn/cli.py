"""Command-line entry point: prepare, train, eval, predict, heatmap, compare-views."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .data import (
    Dataset,
    ImageSource,
    cache_path,
    compute_stack,
    limit_per_class,
    load_rgb,
    read_split_manifest,
    resize_bilinear,
    scan_dataset,
    split_stratified,
    write_split_manifest,
)
from .errors import ConfigurationError, MVCNNError, StaleCacheError, VocabularyError
from .gradcam import gradcam, overlay, save_png
from .metrics import evaluate
from .model import Model, build_model, count_parameters, forward, load_checkpoint
from .train import EpochRecord, History, fit
from .views import ViewCombination, read_mvvs_header, stack_views, write_mvvs

log = logging.getLogger("mvcnn")

ABLATION_ORDER = [c.value for c in ViewCombination]
ABLATION_COLUMNS = ["combo", "channels", "train_acc", "val_acc", "macro_f1", "params", "seconds_per_epoch"]


# --- shared plumbing ---------------------------------------------------------------


def _thread_limit(threads: int):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    for key in ("seed", "out", "threads", "limit_per_class"):
        value = getattr(args, key, None)
        if value is not None:
            updates[key] = value
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        updates[k.strip().replace("-", "_")] = v
    for key in ("dataset", "combo", "epochs", "batch_size", "lr", "sigma", "d", "view_mode", "conv_plan"):
        value = getattr(args, key, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "size", None):
        updates["input_h"], updates["input_w"] = args.size
    if updates:
        cfg = cfg.with_updates(**updates)
    if not cfg.threads and os.environ.get("MVCNN_THREADS"):
        cfg = cfg.with_updates(threads=os.environ["MVCNN_THREADS"])
    return cfg


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    if not cfg.dataset:
        raise ConfigurationError("no dataset given (config key 'dataset' or --dataset)")
    full = scan_dataset(cfg.dataset)
    if cfg.limit_per_class:
        full = limit_per_class(full, cfg.limit_per_class, cfg.seed)
    train, val = split_stratified(full, cfg.val_fraction, cfg.seed)
    return full, train, val


def sources(cfg: RunConfig, train: Dataset, val: Dataset, combo=None) -> tuple[ImageSource, ImageSource]:
    combo = ViewCombination.parse(combo or cfg.combo)
    vp = cfg.view_params()
    return (
        ImageSource(train, combo, vp, cfg.input_size, cfg.in_memory),
        ImageSource(val, combo, vp, cfg.input_size, cfg.in_memory),
    )


def write_classes(path: Path, classes: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{c}\n" for c in classes))


def find_sidecar(checkpoint: Path, name: str) -> Optional[Path]:
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / name).exists():
            return d / name
    return None


def open_checkpoint(path, args) -> tuple[Model, RunConfig, list[str]]:
    """Load a checkpoint plus the run config and class names stored beside it."""
    path = Path(path)
    run_cfg_path = find_sidecar(path, "run.cfg")
    cfg = cfgmod.load(run_cfg_path) if run_cfg_path else RunConfig()
    if getattr(args, "config", None):
        cfg = cfgmod.load(args.config)
    model = load_checkpoint(path, input_size=cfg.input_size, dropout_rate=cfg.dropout_rate)
    classes_path = find_sidecar(path, "classes.txt")
    if classes_path:
        classes = classes_path.read_text().splitlines()
    else:
        classes = [str(i) for i in range(model.config.class_count)]
    if len(classes) != model.config.class_count:
        raise VocabularyError(f"{classes_path} lists {len(classes)} classes, checkpoint has {model.config.class_count}")
    cfg = cfg.with_updates(combo=model.config.view_combination.value)
    return model, cfg, classes


def train_run(cfg: RunConfig, train: Dataset, val: Dataset, out: Path, combo=None):
    """Build, fit and persist one model; returns ``(model, history, val_source)``."""
    combo = ViewCombination.parse(combo or cfg.combo)
    run_cfg = cfg.with_updates(combo=combo.value, out=str(out))
    out.mkdir(parents=True, exist_ok=True)
    run_cfg.save(out / "run.cfg")
    write_classes(out / "classes.txt", train.classes)
    write_split_manifest(out / "split.csv", train, val)
    train_src, val_src = sources(run_cfg, train, val, combo)
    model = build_model(run_cfg.model_config(train.class_count), run_cfg.seed)
    model, history = fit(model, train_src, val_src, run_cfg.train_config(), out)
    return model, history, val_src


# --- commands ----------------------------------------------------------------------


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    ds = scan_dataset(cfg.dataset)
    if cfg.limit_per_class:
        ds = limit_per_class(ds, cfg.limit_per_class, cfg.seed)
    combo, vp, size = cfg.view_combination, cfg.view_params(), cfg.input_size
    written = reused = 0
    total_bytes = 0
    for path, _ in ds.samples:
        cp = cache_path(ds, path, combo, vp, size)
        if cp.exists():
            c, h, w = read_mvvs_header(cp)
            if c != combo.channel_count or (h, w) != size:
                raise StaleCacheError(f"{cp}: cached {c}x{h}x{w} does not match {combo.channel_count}x{size}")
            reused += 1
        else:
            write_mvvs(cp, compute_stack(path, combo, vp, size))
            written += 1
        total_bytes += cp.stat().st_size
    for name, count in zip(ds.classes, ds.counts()):
        print(f"{name},{count}")
    print(f"written={written} reused={reused} bytes={total_bytes}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _, train, val = load_splits(cfg)
    out = Path(cfg.out)
    model, history, _ = train_run(cfg, train, val, out)
    last = history.records[-1]
    print(f"trained {len(history)} epoch(s): train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, classes = open_checkpoint(args.checkpoint, args)
    dataset = scan_dataset(args.dataset)
    if dataset.classes != classes:
        missing = sorted(set(classes) - set(dataset.classes))
        extra = sorted(set(dataset.classes) - set(classes))
        raise VocabularyError(
            f"class vocabularies differ: only in checkpoint {missing or '[]'}, only in dataset {extra or '[]'}"
            + ("" if missing or extra else " (order differs)")
        )
    if args.split_manifest:
        parts = read_split_manifest(args.split_manifest, dataset)
        if args.split not in parts:
            raise ConfigurationError(f"split {args.split!r} not in manifest (has {sorted(parts)})")
        dataset = parts[args.split]
    history = None
    timing = find_sidecar(Path(args.checkpoint), "timing.csv")
    if timing:
        history = _read_timing(timing)
    report = evaluate(model, dataset, model.config.view_combination, cfg.view_params(), cfg.input_size, history)
    out = Path(args.out) if getattr(args, "out", None) else Path(args.checkpoint).parent / "report"
    report.write(out)
    print(f"accuracy={report.overall_accuracy:.6f} macro_f1={report.macro_f1:.6f} report in {out}")
    return 0


def _read_timing(path: Path) -> History:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return History([EpochRecord(int(r["epoch"]), 0.0, 0.0, 0.0, 0.0, float(r["seconds"])) for r in rows])


def _input_stack(path, cfg: RunConfig, combo: ViewCombination) -> tuple[np.ndarray, np.ndarray]:
    rgb = load_rgb(path, cfg.input_size)
    return rgb, stack_views(rgb, combo, cfg.view_params()).data


def cmd_predict(args) -> int:
    model, cfg, classes = open_checkpoint(args.checkpoint, args)
    _, stack = _input_stack(args.image, cfg, model.config.view_combination)
    probs, _ = forward(model, stack[None], "infer")
    p = probs[0].astype(np.float64)
    k = min(args.top_k, len(classes))
    order = np.argsort(-p, kind="stable")[:k]
    print("rank,class,probability")
    for rank, idx in enumerate(order, start=1):
        print(f"{rank},{classes[idx]},{p[idx]:.6f}")
    return 0


def cmd_heatmap(args) -> int:
    model, cfg, classes = open_checkpoint(args.checkpoint, args)
    original = load_rgb(args.image)
    _, stack = _input_stack(args.image, cfg, model.config.view_combination)
    target = args.target_class
    if target is None:
        probs, _ = forward(model, stack[None], "infer")
        target = int(probs[0].argmax())
        print(f"class={classes[target]} index={target}")
    elif target.isdigit():
        target = int(target)
    elif target in classes:
        target = classes.index(target)
    else:
        raise ConfigurationError(f"unknown class {target!r}")
    heat = gradcam(model, stack, int(target), args.layer)
    h, w = original.shape[:2]
    up = heat.upsampled
    if up.shape != (h, w):
        up = np.clip(resize_bilinear(up, h, w), 0.0, 1.0)
    save_png(overlay(up, original, args.alpha), args.output)
    if args.raw:
        write_mvvs(args.raw, heat.raw.astype(np.float32)[None])
    print(f"wrote {args.output}")
    return 0


def run_ablation(cfg: RunConfig, out: Path, seeds: Optional[Sequence[int]] = None) -> list[dict]:
    """Train every view combination on one shared split; write ``ablation.csv``.

    With several ``seeds`` each combination is trained once per seed (the
    split stays fixed by ``cfg.seed``), per-run rows go to
    ``ablation_runs.csv`` and ``ablation.csv`` holds the means.
    """
    seeds = list(seeds) if seeds else [cfg.seed]
    _, train, val = load_splits(cfg)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    rows = []
    for combo in ViewCombination:
        per_seed = []
        for seed in seeds:
            run_dir = out / combo.value if len(seeds) == 1 else out / combo.value / f"seed{seed}"
            try:
                model, history, val_src = train_run(cfg.with_updates(seed=seed), train, val, run_dir, combo)
                report = evaluate(model, val_src, history=history, batch_size=cfg.batch_size)
                report.write(run_dir / "report")
                last = history.records[-1]
                per_seed.append(
                    dict(
                        combo=combo.value,
                        channels=combo.channel_count,
                        seed=seed,
                        train_acc=last.train_acc,
                        val_acc=last.val_acc,
                        macro_f1=report.macro_f1,
                        params=count_parameters(model)[0],
                        seconds_per_epoch=history.mean_epoch_seconds,
                    )
                )
            except MVCNNError as exc:
                log.error("combo %s seed %s failed: %s", combo.value, seed, exc)
                per_seed.append(dict(combo=combo.value, channels=combo.channel_count, seed=seed, failed=True))
        runs += per_seed
        ok = [r for r in per_seed if not r.get("failed")]
        if len(ok) == len(per_seed):
            row = {k: ok[0][k] for k in ("combo", "channels", "params")}
            for k in ("train_acc", "val_acc", "macro_f1", "seconds_per_epoch"):
                row[k] = float(np.mean([r[k] for r in ok]))
        else:
            row = dict(combo=combo.value, channels=combo.channel_count, failed=True)
        rows.append(row)
        _write_ablation(out / "ablation.csv", rows)
    if len(seeds) > 1:
        _write_ablation(out / "ablation_runs.csv", runs, with_seed=True)
    return rows


def _write_ablation(path: Path, rows: list[dict], with_seed: bool = False) -> None:
    cols = ABLATION_COLUMNS[:2] + (["seed"] if with_seed else []) + ABLATION_COLUMNS[2:]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            if r.get("failed"):
                head = [r["combo"], r["channels"]] + ([r["seed"]] if with_seed else [])
                w.writerow(head + ["FAILED"] + [""] * (len(cols) - len(head) - 1))
                continue
            vals = []
            for c in cols:
                v = r[c]
                vals.append(f"{v:.6f}" if isinstance(v, float) else v)
            w.writerow(vals)


def cmd_compare_views(args) -> int:
    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = run_ablation(cfg, Path(cfg.out), seeds)
    for r in rows:
        if r.get("failed"):
            print(f"{r['combo']}: FAILED")
        else:
            print(f"{r['combo']}: train_acc={r['train_acc']:.4f} val_acc={r['val_acc']:.4f}")
    return 1 if any(r.get("failed") for r in rows) else 0


# --- argument parsing ----------------------------------------------------------------


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="flat key=value run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="BLAS threads (default: $MVCNN_THREADS or library default)")
    p.add_argument("--limit-per-class", dest="limit_per_class", type=int, help="use the first N samples per class")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _view_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--combo", choices=ABLATION_ORDER)
    p.add_argument("--sigma", type=float)
    p.add_argument("--d", type=int, help="window radius of the gradient-energy sum")
    p.add_argument("--view-mode", dest="view_mode", choices=["paper-literal", "smoothed-derivative"])
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="network input size")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--conv-plan", dest="conv_plan", help='e.g. "32,32p,64,64p,128,128p,256p"')
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="mvcnn", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="precompute view-stack caches")
    p.add_argument("dataset", nargs="?")
    _view_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train one model")
    _train_flags(p)
    _view_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="write the evaluation report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split-manifest", dest="split_manifest")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="top-k classes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.add_argument("--top-k", dest="top_k", type=int, default=5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("heatmap", parents=[common], help="Grad-CAM overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")
    p.add_argument("--class", dest="target_class", default=None, help="class index or name (default: argmax)")
    p.add_argument("--layer", default=None, help="conv layer name (default: last conv)")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("-o", "--output", default="heatmap.png")
    p.add_argument("--raw", help="also write the raw map as a 1-channel MVVS file")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("compare-views", parents=[common], help="train all four view combinations")
    _train_flags(p)
    _view_flags(p)
    p.add_argument("--seeds", help="comma-separated training seeds (default: --seed)")
    p.set_defaults(func=cmd_compare_views)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = getattr(args, "threads", None) or int(os.environ.get("MVCNN_THREADS", "0") or 0)
    try:
        with _thread_limit(threads):
            return args.func(args)
    except (MVCNNError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
