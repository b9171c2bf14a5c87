"""Command-line driver: ``racam <command> [flags]``.

Commands: gen-data, train-cls, cam, pseudo-label, train-seg, eval, sweep-delta.
Settings come from defaults, then ``--config file.json``, then flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cams import METHODS, default_layers
from .data import GenParams, SampleRecord, decode_pgm, generate, load_dataset, read_mask, save_dataset, split, \
    stack_images, write_mask, write_pgm
from .fgbp import PER_CHANNEL, PER_LAYER
from .metrics import TABLE_HEADER
from .models import classify, load_model, mini_segnet_init, save_model, tiny_vgg_init, train_classifier, \
    train_segmenter
from .pipeline import DEFECT_SCOPE, FULL_SCOPE, RunConfig, evaluate_masks, heatmaps, load_config_file, \
    pseudo_labels, report_envelope, segment_samples, sweep_delta

log = logging.getLogger("racam")

SPLITS = ("train", "val", "test", "all")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _dataset(cfg: RunConfig) -> list[SampleRecord]:
    if not cfg.data:
        raise CliError("--data is required for this command")
    return load_dataset(cfg.data)


def _select(samples: list[SampleRecord], which: str) -> list[SampleRecord]:
    if which == "all":
        return list(samples)
    return split(samples)[which]


def _model(path, default: Path):
    p = Path(path) if path else default
    if not p.is_file():
        raise CliError(f"model file {p} not found")
    return load_model(p)


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out)


def _read_mask_dir(directory: Path, ids) -> dict[str, np.ndarray]:
    masks = {}
    for sid in ids:
        p = directory / f"{sid}.pgm"
        if not p.is_file():
            raise CliError(f"no mask for id {sid!r} in {directory}")
        masks[sid] = read_mask(p)
    return masks


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    params = GenParams(seed=cfg.seed, count=cfg.count, defect_rate=cfg.defect_rate, size=(cfg.height, cfg.width))
    samples = generate(params)
    out = _out(cfg)
    try:
        save_dataset(samples, out)
    except OSError as e:
        raise CliError(f"cannot write dataset to {out}: {e}") from None
    n_def = sum(s.label for s in samples)
    print(f"wrote {len(samples)} samples ({n_def} defective, {len(samples) - n_def} defect-free) to {out}")
    return 0


def cmd_train_cls(cfg: RunConfig, args) -> int:
    samples = _dataset(cfg)
    parts = split(samples)
    train, val = parts["train"], parts["val"]
    if not train:
        raise CliError("training split is empty")
    tc = cfg.train_config("cls")
    model = tiny_vgg_init(cfg.seed)
    val_arg = (stack_images(val), np.array([s.label for s in val])) if val else None
    best, history = train_classifier(model, stack_images(train), np.array([s.label for s in train]), tc, val_arg)
    out = _out(cfg)
    (out / "models").mkdir(parents=True, exist_ok=True)
    save_model(best, out / "models" / "classifier.rcmw")
    _write_json(out / "reports" / "train_cls.json",
                report_envelope(cfg, train=tc.as_dict(), history=history, n_train=len(train), n_val=len(val)))
    last = history[-1] if history else {}
    print(f"lr={tc.lr} momentum={tc.momentum} batch={tc.batch} epochs={tc.epochs}")
    print(f"final loss {last.get('loss', float('nan')):.4f}; best val accuracy "
          f"{max((h.get('val_accuracy', 0) for h in history), default=float('nan')):.4f}")
    return 0


def cmd_cam(cfg: RunConfig, args) -> int:
    if cfg.method not in METHODS:
        raise CliError(f"unknown method {cfg.method!r}; valid: {', '.join(METHODS)}")
    samples = _select(_dataset(cfg), cfg.split)
    out = _out(cfg)
    model = _model(args.model, out / "models" / "classifier.rcmw")
    maps = heatmaps(model, [s.image for s in samples], cfg.method, cfg.fgbp, cfg.layers, cfg.fusion, jobs=cfg.jobs)
    layers = list(cfg.layers) if cfg.layers else list(default_layers(model, cfg.method))
    hdir = out / "heatmaps"
    hdir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for s, m in zip(samples, maps):
        write_pgm(m, hdir / f"{s.id}.pgm")
        entries[s.id] = {"file": f"{s.id}.pgm", "method": cfg.method, "delta": cfg.delta, "layers": layers}
    _write_json(hdir / "manifest.json", report_envelope(cfg, heatmaps=entries))
    print(f"wrote {len(entries)} {cfg.method} heatmaps to {hdir}")
    return 0


def cmd_pseudo_label(cfg: RunConfig, args) -> int:
    out = _out(cfg)
    hdir = Path(args.heatmaps) if args.heatmaps else out / "heatmaps"
    manifest = hdir / "manifest.json"
    if not manifest.is_file():
        raise CliError(f"missing heatmap manifest {manifest}")
    entries = json.loads(manifest.read_text())["heatmaps"]
    ids = sorted(entries)
    maps = []
    for sid in ids:
        raw = decode_pgm((hdir / entries[sid]["file"]).read_bytes(), str(hdir / entries[sid]["file"]))
        maps.append((raw.astype(np.float64) / 255.0)[None])
    predicted = None
    if cfg.gate:
        by_id = {s.id: s for s in _dataset(cfg)}
        unknown = [sid for sid in ids if sid not in by_id]
        if unknown:
            raise CliError(f"heatmap id {unknown[0]!r} not in dataset {cfg.data}")
        model = _model(args.model, out / "models" / "classifier.rcmw")
        predicted = classify(model, stack_images([by_id[sid] for sid in ids]))
    masks = pseudo_labels(maps, predicted, cfg.min_area)
    mdir = out / "pseudo_masks"
    mdir.mkdir(parents=True, exist_ok=True)
    for sid, m in zip(ids, masks):
        write_mask(m, mdir / f"{sid}.pgm")
    _write_json(mdir / "manifest.json", report_envelope(cfg, masks={sid: f"{sid}.pgm" for sid in ids},
                                                         gated=[sid for i, sid in enumerate(ids)
                                                                if predicted is not None and predicted[i] == 0]))
    print(f"wrote {len(masks)} pseudo-masks to {mdir}")
    return 0


def cmd_train_seg(cfg: RunConfig, args) -> int:
    samples = _dataset(cfg)
    out = _out(cfg)
    mdir = Path(args.masks) if args.masks else out / "pseudo_masks"
    if not mdir.is_dir():
        raise CliError(f"pseudo-mask directory {mdir} not found")
    parts = split(samples)
    available = {p.stem for p in mdir.glob("*.pgm")}
    train = [s for s in parts["train"] if s.id in available]
    val = [s for s in parts["val"] if s.id in available]
    if not train:
        raise CliError(f"no pseudo-masks in {mdir} for training-split ids")
    masks = _read_mask_dir(mdir, [s.id for s in train + val])
    tc = cfg.train_config("seg")
    x = stack_images(train)
    y = np.stack([masks[s.id] for s in train])
    # validation against pseudo-masks keeps pixel ground truth out of training
    val_arg = (stack_images(val), [masks[s.id] for s in val]) if val else None
    best, history = train_segmenter(mini_segnet_init(cfg.seed), x, y, tc, val_arg)
    (out / "models").mkdir(parents=True, exist_ok=True)
    save_model(best, out / "models" / "segmenter.rcmw")
    _write_json(out / "reports" / "train_seg.json",
                report_envelope(cfg, train=tc.as_dict(), history=history, n_train=len(train), n_val=len(val)))
    print(f"lr={tc.lr} momentum={tc.momentum} batch={tc.batch} epochs={tc.epochs}")
    print(f"final loss {history[-1]['loss']:.4f}" if history else "no epochs run")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    everything = _dataset(cfg)
    samples = _select(everything, cfg.split)
    out = _out(cfg)
    if args.segmenter:
        model = _model(args.segmenter, out / "models" / "segmenter.rcmw")
        preds = segment_samples(model, samples)
        name = args.name or "segmenter"
    else:
        pdir = Path(args.pred) if args.pred else out / "pseudo_masks"
        if not pdir.is_dir():
            raise CliError(f"prediction directory {pdir} not found")
        extra = sorted({p.stem for p in pdir.glob("*.pgm")} - {s.id for s in everything})
        if extra:
            raise CliError(f"prediction for unknown id {extra[0]!r} in {pdir}")
        masks = _read_mask_dir(pdir, [s.id for s in samples])
        preds = [masks[s.id] for s in samples]
        name = args.name or pdir.name
    report = evaluate_masks(preds, samples, cfg.scope, method=name, delta=cfg.delta, layers=cfg.layers)
    payload = report_envelope(cfg, report=report.to_dict())
    _write_json(out / "reports" / f"eval_{name}.json", payload)
    print(TABLE_HEADER)
    print(report.table_row(name))
    return 0


def cmd_sweep_delta(cfg: RunConfig, args) -> int:
    samples = _dataset(cfg)
    out = _out(cfg)
    model = _model(args.model, out / "models" / "classifier.rcmw")
    parts = split(samples)
    rows = sweep_delta(model, {"train": parts["train"], "test": parts["test"]}, cfg.deltas, cfg.method,
                       cfg.layers, cfg.scope, cfg.fgbp_scope, cfg.jobs, cfg.fusion)
    sdir = out / "sweeps"
    sdir.mkdir(parents=True, exist_ok=True)
    with open(sdir / f"delta_{cfg.method}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["delta", "train_iou", "test_iou"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if k != "delta" else f"{v:g}") for k, v in r.items()})
    _write_json(out / "reports" / f"sweep_delta_{cfg.method}.json", report_envelope(cfg, rows=rows))
    print(f"{'delta':>6s} {'train':>7s} {'test':>7s}")
    for r in rows:
        print(f"{r['delta']:6g} {100 * r['train_iou']:7.2f} {100 * r['test_iou']:7.2f}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cls": cmd_train_cls,
    "cam": cmd_cam,
    "pseudo-label": cmd_pseudo_label,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "sweep-delta": cmd_sweep_delta,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, help="learning rate (default 0.0005)")
    p.add_argument("--momentum", type=float, help="momentum coefficient (default 0.9)")
    p.add_argument("--batch", type=int, help="batch size (default 4)")
    p.add_argument("--epochs", type=int, help="number of epochs (default 10)")
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                   help="disable random horizontal and vertical flips")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags take precedence")
    common.add_argument("--seed", type=int, help="random seed (default 7)")
    common.add_argument("--jobs", type=int, help="worker threads for per-image work (default 1)")
    common.add_argument("--out", help="output directory (default runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="racam", description="Region-aware CAM weak-supervision toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic defect dataset")
    p.add_argument("--count", type=int, help="number of samples (default 300)")
    p.add_argument("--defect-rate", type=float, help="fraction of defective samples (default 0.5)")
    p.add_argument("--height", type=int, help="image height, multiple of 4 (default 96)")
    p.add_argument("--width", type=int, help="image width, multiple of 4 (default 288)")

    p = sub.add_parser("train-cls", parents=[common], help="train the image-level classifier")
    p.add_argument("--data", help="dataset directory")
    _train_flags(p)

    p = sub.add_parser("cam", parents=[common], help="write defect-class heatmaps")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", help="classifier weights (default OUT/models/classifier.rcmw)")
    p.add_argument("--method", help=f"one of {', '.join(METHODS)} (default ra-cam)")
    p.add_argument("--delta", type=float, help="FGBP percentile (default 50)")
    p.add_argument("--fgbp-scope", choices=(PER_CHANNEL, PER_LAYER), help="threshold granularity")
    p.add_argument("--layers", type=lambda s: [x for x in s.split(",") if x], help="comma-separated layer ids")
    p.add_argument("--fusion", choices=("max", "mean"), help="multi-layer fusion rule (default max)")
    p.add_argument("--split", choices=SPLITS, help="which split to process (default test)")

    p = sub.add_parser("pseudo-label", parents=[common], help="binarize heatmaps into pseudo-masks")
    p.add_argument("--data", help="dataset directory (for classifier gating)")
    p.add_argument("--heatmaps", help="heatmap directory (default OUT/heatmaps)")
    p.add_argument("--model", help="classifier weights used to gate defect-free images")
    p.add_argument("--min-area", type=int, help="drop connected components smaller than this (default 0)")
    p.add_argument("--no-gate", dest="gate", action="store_false", default=None,
                   help="keep masks of images the classifier calls defect-free")

    p = sub.add_parser("train-seg", parents=[common], help="train the segmenter on pseudo-masks")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--masks", help="pseudo-mask directory (default OUT/pseudo_masks)")
    _train_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score masks against ground truth")
    p.add_argument("--data", help="dataset directory with ground-truth masks")
    p.add_argument("--pred", help="directory of predicted mask PGMs (default OUT/pseudo_masks)")
    p.add_argument("--segmenter", help="evaluate this segmenter's predictions instead of mask files")
    p.add_argument("--name", help="label for the table row and report file")
    p.add_argument("--scope", choices=(DEFECT_SCOPE, FULL_SCOPE), help="defect images only, or the full split")
    p.add_argument("--split", choices=SPLITS, help="which split to score (default test)")
    p.add_argument("--delta", type=float, help="recorded in the report")

    p = sub.add_parser("sweep-delta", parents=[common], help="IoU of CAM pseudo-masks across delta values")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--model", help="classifier weights (default OUT/models/classifier.rcmw)")
    p.add_argument("--method", help="ra-cam, layer-cam+fgbp or full-grad+fgbp (default ra-cam)")
    p.add_argument("--deltas", type=lambda s: [float(x) for x in s.split(",")], help="comma-separated grid")
    p.add_argument("--layers", type=lambda s: [x for x in s.split(",") if x], help="comma-separated layer ids")
    p.add_argument("--fgbp-scope", choices=(PER_CHANNEL, PER_LAYER), help="threshold granularity")
    p.add_argument("--fusion", choices=("max", "mean"), help="multi-layer fusion rule (default max)")
    p.add_argument("--scope", choices=(DEFECT_SCOPE, FULL_SCOPE), help="defect images only, or the full split")
    return parser


_NOT_CONFIG = {"command", "config", "verbose", "model", "heatmaps", "masks", "pred", "segmenter", "name"}
_TRAIN_KEYS = ("lr", "momentum", "batch", "epochs", "augment")


def resolve_config(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG and k not in _TRAIN_KEYS}
    train = {k: getattr(args, k) for k in _TRAIN_KEYS if getattr(args, k, None) is not None}
    if train:
        flags["train_cls" if args.command == "train-cls" else "train_seg"] = train
    file_values = load_config_file(args.config) if args.config else {}
    return RunConfig.from_sources(file_values, flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (CliError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"racam {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
