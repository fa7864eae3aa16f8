"""Command-line entry point: ``histodense <subcommand> ...``.

Every subcommand that takes ``--config`` writes under the experiment
directory (``output_dir`` in the config) using the fixed layout
``config/ checkpoints/ predictions/ reports/ logs/`` and records the
config hash next to what it produces.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from .config import RUN_DIRS, ExperimentConfig, load_config
from .infer import decode, plan_tiles, predict_image, render_overlay, write_prediction
from .labels import MERGED_LEGEND, majority_vote, prepare_annotations, prob_encode, read_grade_map, write_grade_map
from .metrics import EvaluationReport, evaluate
from .netgraph import (
    MICRO_CONFIG,
    ConfigError,
    NetworkConfig,
    architecture_report,
    build_network,
    gradient_check,
)
from .preprocess import load_rgb_u8, make_tissue_mask, read_mask, to_six_channel, write_mask
from .sampler import IMAGE_EXTS, DatasetIndex, build_index
from .trainer import Checkpoint, FoldPlan, make_folds, train, truth_maps

log = logging.getLogger("histodense")

GRADCHECK_TOLERANCE = 1e-4
HASH_FILE = "config_hash.txt"


class CommandError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _prepare_run(cfg: ExperimentConfig) -> Path:
    run = cfg.run_dir
    for d in RUN_DIRS:
        (run / d).mkdir(parents=True, exist_ok=True)
    cfg_file = run / "config" / "config.yaml"
    hash_file = run / "config" / HASH_FILE
    if hash_file.exists() and hash_file.read_text().strip() != cfg.hash:
        raise CommandError(
            f"{run} already holds artifacts of config {hash_file.read_text().strip()}; "
            f"current config hashes to {cfg.hash}. Use a different output_dir."
        )
    cfg_file.write_text(cfg.dump())
    hash_file.write_text(cfg.hash + "\n")
    return run


def _index_path(run: Path) -> Path:
    return run / "config" / "index.json"


def _load_index(cfg: ExperimentConfig) -> DatasetIndex:
    path = _index_path(cfg.run_dir)
    if not path.exists():
        raise CommandError(f"missing index {path}; run `histodense index --config ...` first")
    return DatasetIndex.load(path, root=cfg.dataset_root)


def _load_folds(cfg: ExperimentConfig) -> FoldPlan:
    path = cfg.run_dir / "config" / "folds.json"
    if not path.exists():
        raise CommandError(f"missing fold plan {path}; run `histodense folds --config ...` first")
    return FoldPlan.from_json(path.read_text())


def _dataset_images(root: Path) -> list[Path]:
    d = root / "images"
    if not d.is_dir():
        raise CommandError(f"missing images directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def _check_hash(directory: Path, expected: str) -> None:
    f = directory / HASH_FILE
    if not f.exists():
        raise CommandError(f"{directory} has no {HASH_FILE}; cannot verify provenance")
    found = f.read_text().strip()
    if found != expected:
        raise CommandError(f"{directory} was produced by config {found}, not {expected}; "
                           "refusing to mix artifacts")


# --------------------------------------------------------------------------
# subcommands


def cmd_mask(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        run = _prepare_run(cfg)
        params = cfg.tissue.build()
        out = run / "masks"
        images = _dataset_images(Path(cfg.dataset_root))
        (out / HASH_FILE).parent.mkdir(parents=True, exist_ok=True)
        (out / HASH_FILE).write_text(cfg.hash + "\n")
    else:
        if not args.input or not args.output:
            raise CommandError("mask needs --config, or --input and --output")
        from .preprocess import TissueMaskParams

        params = TissueMaskParams(args.radius, args.min_hole_area)
        src = Path(args.input)
        images = _dataset_images(src) if src.is_dir() else [src]
        out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for p in images:
        mask = make_tissue_mask(load_rgb_u8(p), params)
        write_mask(out / f"{p.stem}.png", mask)
        print(f"{p.stem}: tissue fraction {mask.mean():.4f}")
    return 0


def cmd_index(args) -> int:
    cfg = load_config(args.config)
    run = _prepare_run(cfg)
    mask_dir = run / "masks" if (run / "masks").is_dir() else None
    index = build_index(cfg.dataset_root, cfg.task, cfg.index.center_stride, cfg.index.max_centers,
                        cfg.tissue.build(), out_path=_index_path(run), mask_dir=mask_dir)
    for w in index.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"indexed {len(index.entries)} images -> {_index_path(run)}")
    return 0


def cmd_fuse_labels(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        root, task = Path(cfg.dataset_root), cfg.task
        run = _prepare_run(cfg)
        out = Path(args.output) if args.output else run / "labels" / f"fused_{args.mode}"
        mask_dir = run / "masks" if (run / "masks").is_dir() else root / "masks"
        params = cfg.tissue.build()
    else:
        if not args.dataset or not args.output:
            raise CommandError("fuse-labels needs --config, or --dataset and --output")
        from .preprocess import TissueMaskParams

        root, task, out = Path(args.dataset), args.task, Path(args.output)
        mask_dir = root / "masks"
        params = TissueMaskParams()
    labels_dir = root / "labels"
    if not labels_dir.is_dir():
        raise CommandError(f"missing labels directory: {labels_dir}")
    annotators = sorted(p.name for p in labels_dir.iterdir() if p.is_dir())
    out.mkdir(parents=True, exist_ok=True)
    for img in _dataset_images(root):
        raw = {a: read_grade_map(labels_dir / a / f"{img.stem}.png") for a in annotators
               if (labels_dir / a / f"{img.stem}.png").exists()}
        if not raw:
            continue
        if task == "digestpath":
            raw = {a: (m > 0).astype(np.uint8) for a, m in raw.items()}
        mfile = mask_dir / f"{img.stem}.png"
        if args.no_tissue_gate:
            tissue = None
        elif mfile.exists():
            tissue = read_mask(mfile)
        else:
            tissue = make_tissue_mask(load_rgb_u8(img), params)
        aset = prepare_annotations(img.stem, raw, tissue, task)
        if args.mode == "majority":
            legend = MERGED_LEGEND if task == "gleason" else {0: "non-cancer", 1: "cancer"}
            write_grade_map(out / f"{img.stem}.png", majority_vote(aset), legend)
        else:
            np.save(out / f"{img.stem}.npy", prob_encode(aset))
        print(f"{img.stem}: fused {len(raw)} annotations")
    return 0


def cmd_folds(args) -> int:
    cfg = load_config(args.config)
    run = _prepare_run(cfg)
    index = _load_index(cfg)
    plan = make_folds(index.image_ids, cfg.folds, cfg.fold_seed, cfg.validation_fold)
    (run / "config" / "folds.json").write_text(plan.to_json())
    print("fold sizes: " + " ".join(str(s) for s in plan.sizes()))
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    run = _prepare_run(cfg)
    index = _load_index(cfg)
    plan = _load_folds(cfg)
    fold = cfg.validation_fold if args.fold is None else args.fold
    plan.validation_fold = fold
    net_cfg = cfg.network_config()
    ckdir = run / "checkpoints" / f"fold_{fold}"
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None and resume.config_hash != cfg.hash:
        raise CommandError(f"checkpoint {args.resume} belongs to config {resume.config_hash}")
    logfile = run / "logs" / f"train_fold_{fold}.jsonl"
    if resume is None and logfile.exists():
        logfile.unlink()

    def on_epoch(rec):
        with logfile.open("a") as fh:
            fh.write(json.dumps({"config_hash": cfg.hash, "fold": fold, **rec}, sort_keys=True) + "\n")

    torch.manual_seed(cfg.seed)
    result = train(net_cfg, index, plan, cfg.label_source, cfg.schedule.build(), cfg.seed,
                   ckdir, resume, args.stop_after, cfg.hash, args.validate_every, on_epoch,
                   prefetch=cfg.prefetch)
    print(f"fold {fold}: trained to epoch {result.checkpoint.epoch}, "
          f"final loss {result.log[-1]['train_loss']:.5f}" if result.log else "nothing to do")
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    run = _prepare_run(cfg)
    index = _load_index(cfg)
    fold = cfg.validation_fold if args.fold is None else args.fold
    ck_path = Path(args.checkpoint) if args.checkpoint else run / "checkpoints" / f"fold_{fold}" / "last.pt"
    if not ck_path.exists():
        raise CommandError(f"missing checkpoint {ck_path}")
    ckpt = Checkpoint.load(ck_path)
    if ckpt.config_hash != cfg.hash:
        raise CommandError(f"checkpoint {ck_path} belongs to config {ckpt.config_hash}, not {cfg.hash}")
    net = ckpt.restore_network()
    if args.images == "validation":
        ids = _load_folds(cfg).fold(fold)
    elif args.images == "all":
        ids = index.image_ids
    else:
        ids = args.images.split(",")
    out = run / "predictions" / f"fold_{fold}"
    out.mkdir(parents=True, exist_ok=True)
    (out / HASH_FILE).write_text(cfg.hash + "\n")
    side = net.config.patch_side
    for iid in ids:
        e = index.by_id.get(iid)
        if e is None:
            raise CommandError(f"unknown image id {iid}")
        rgb = index.rgb(e)
        plan = plan_tiles(rgb.shape[:2], side, cfg.overlap, net.config.downsampling_factor)
        pred = predict_image(net, to_six_channel(rgb), plan, cfg.inference.window,
                             cfg.inference.batch_size)
        dec = decode(pred, cfg.task)
        write_prediction(out, iid, pred, dec)
        if args.overlay:
            from PIL import Image

            Image.fromarray(render_overlay(rgb, dec.classes)).save(out / f"{iid}_overlay.png")
        print(f"{iid}: {len(plan.origins)} tiles")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    run = _prepare_run(cfg)
    index = _load_index(cfg)
    fold = cfg.validation_fold if args.fold is None else args.fold
    pdir = run / "predictions" / f"fold_{fold}"
    if not pdir.is_dir():
        raise CommandError(f"missing predictions directory {pdir}")
    _check_hash(pdir, cfg.hash)
    ids = sorted(p.name[: -len("_classes.png")] for p in pdir.glob("*_classes.png"))
    if not ids:
        raise CommandError(f"no predictions in {pdir}")
    preds = {i: read_grade_map(pdir / f"{i}_classes.png") for i in ids}
    rep = evaluate(preds, truth_maps(index, ids), cfg.task, fold_id=fold)
    base = run / "reports" / f"fold_{fold}"
    doc = json.loads(rep.to_json())
    doc["config_hash"] = cfg.hash
    base.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    base.with_suffix(".csv").write_text(rep.to_csv())
    base.with_suffix(".txt").write_text(rep.to_text())
    print(rep.to_text(), end="")
    return 0


def cmd_report(args) -> int:
    from .report import write_report

    if args.config:
        cfg = load_config(args.config, check_paths=False)
        run = cfg.run_dir
    elif args.run_dir:
        run = Path(args.run_dir)
    else:
        raise CommandError("report needs --config or --run-dir")
    result = write_report(run)
    print(f"wrote {len(result.files)} report files to {run / 'reports'}"
          + (" (PARTIAL: " + "; ".join(result.missing) + ")" if result.missing else ""))
    return 1 if result.missing else 0


def cmd_gradcheck(args) -> int:
    if args.config in (None, "micro"):
        net_cfg = MICRO_CONFIG
    else:
        p = Path(args.config)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        net_cfg = NetworkConfig.loads(p.read_text())
    err = gradient_check(net_cfg, args.probes, args.step, args.seed)
    ok = err <= GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'PASS' if ok else 'FAIL'} at {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_architecture(args) -> int:
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        net_cfg = NetworkConfig.loads(p.read_text())
    else:
        net_cfg = NetworkConfig(variant=args.variant)
    print(architecture_report(build_network(net_cfg)), end="")
    return 0


# --------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="histodense", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", help="compute tissue masks")
    p.add_argument("--config")
    p.add_argument("--input", help="image file or dataset root")
    p.add_argument("--output", help="output directory")
    p.add_argument("--radius", type=int, default=5)
    p.add_argument("--min-hole-area", type=int, default=1024)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("index", help="build the sampling index")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("fuse-labels", help="fuse annotator maps")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--task", choices=("digestpath", "gleason"), default="gleason")
    p.add_argument("--mode", choices=("majority", "probabilistic"), default="majority")
    p.add_argument("--output")
    p.add_argument("--no-tissue-gate", action="store_true")
    p.set_defaults(func=cmd_fuse_labels)

    p = sub.add_parser("folds", help="assign images to cross-validation folds")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--resume")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs (for resumable runs)")
    p.add_argument("--validate-every", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tiled whole-image prediction")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--images", default="validation", help="validation | all | comma-separated ids")
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against labels")
    p.add_argument("--config", required=True)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summary tables, architecture report, training curves")
    p.add_argument("--config")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", default="micro", help="'micro' or a network config file")
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("architecture", help="print the layer table and parameter counts")
    p.add_argument("--config")
    p.add_argument("--variant", default="one_bn_denseunet")
    p.set_defaults(func=cmd_architecture)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: invalid config ({exc.error_count()} problems)", file=sys.stderr)
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"])
            print(f"  {loc}: {err['msg']}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, CommandError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
