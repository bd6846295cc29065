"""Command-line entry point.

Subcommands cover the whole pipeline: synth | ingest | features | pair |
pair-eval | train | eval | ablate. A shared JSON config file provides
defaults; flags win over the file. Exit codes: 0 success, 1 usage,
2 validation failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import run_ablation
from .config import apply_overrides, config_hash, load_config
from .corpus import load_manifest, save_manifest, split_counts
from .errors import SlrkitError, ValidationError
from .features import compute_descriptor, load_features, save_features
from .metrics import emit_report, metrics as seg_metrics, ConfusionMatrix, accumulate
from .pairing import (PairingConfig, build_pairs, evaluate_pairs, load_pairs,
                      pair_iou_histogram, random_pairs, save_pairs)
from .synth import SynthConfig, generate, load_oracle
from .trainer import (TrainConfig, load_checkpoint, net_from_checkpoint, train)
from .util import parallel_map, resize_image, resize_mask


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int,
                   help="cap internal parallelism (default: SLR_THREADS or CPU count)")
    p.add_argument("--no-pca", action="store_true", help="disable PCA reduction for pairing")
    p.add_argument("--tau-min", type=float, help="absolute similarity floor for matching")
    p.add_argument("--no-eta", action="store_true", help="disable agreement weighting")
    p.add_argument("--no-lambda", action="store_true", help="disable the iteration ramp")
    p.add_argument("--no-pairs", action="store_true", help="disable the pair stream")
    p.add_argument("--dry-run", action="store_true",
                   help="validate inputs and print the plan without writing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slrkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"slrkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus + oracle")
    _common_flags(p)

    p = sub.add_parser("ingest", help="validate a manifest and write a normalized copy")
    _common_flags(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("features", help="compute descriptors or pass through embeddings")
    _common_flags(p)
    p.add_argument("--corpus", type=Path, required=True, help="manifest path")
    p.add_argument("--from", dest="from_file", type=Path,
                   help="external feature file to validate and pass through")

    p = sub.add_parser("pair", help="build label-reuse pairs (or the random baseline)")
    _common_flags(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--random", action="store_true", help="random-pair baseline")
    p.add_argument("--count", type=int, help="random pairs per labeled image")

    p = sub.add_parser("pair-eval", help="score pairs against a ground-truth oracle")
    _common_flags(p)
    p.add_argument("--pairs", type=Path, required=True)
    p.add_argument("--oracle", type=Path, required=True)
    p.add_argument("--bins", type=int, default=20, help="histogram bins")

    p = sub.add_parser("train", help="train the segmentation model")
    _common_flags(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--pairs", type=Path, help="pairs file (omit with --no-pairs)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("ablate", help="run the 6-row ablation grid over seeds")
    _common_flags(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--seeds", type=int, help="number of seeds (0..N-1)")

    return parser


def _setup(args) -> tuple[dict, str]:
    cfg = load_config(args.config)
    cfg = apply_overrides(
        cfg, seed=args.seed, no_pca=args.no_pca, tau_min=args.tau_min,
        no_eta=args.no_eta, no_lambda=args.no_lambda, no_pairs=args.no_pairs,
    )
    return cfg, config_hash(cfg)


def _require_out(args) -> Path:
    if args.out is None:
        raise ValidationError("--out DIR is required for this command")
    return args.out


def _train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = cfg["trainer"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
        momentum=t["momentum"], weight_decay=t["weight_decay"],
        poly_power=t["poly_power"], resolution=t["resolution"],
        f1=t["f1"], f2=t["f2"], seed=cfg["seed"] if seed is None else seed,
        dtype=t["dtype"], use_pairs=t["use_pairs"], use_eta=t["use_eta"],
        use_lambda=t["use_lambda"],
        eta_include_background=t["eta_include_background"],
    )


def cmd_synth(args) -> int:
    cfg, chash = _setup(args)
    out = _require_out(args)
    scfg = SynthConfig(seed=cfg["seed"], **cfg["synth"])
    n_images = scfg.subjects * scfg.days_per_subject * scfg.images_per_day
    if args.dry_run:
        print(f"plan: generate {n_images} images ({scfg.subjects} subjects x "
              f"{scfg.days_per_subject} days x {scfg.images_per_day}/day, "
              f"C={scfg.classes}, size={scfg.image_size}) into {out} [config {chash}]")
        return 0
    corpus, _oracle = generate(scfg, out, threads=args.threads)
    counts = split_counts(corpus)
    print(f"generated {len(corpus)} images into {out} [config {chash}]")
    print("splits: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_ingest(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.manifest)
    counts = split_counts(corpus)
    print(f"manifest OK: {len(corpus)} records, {len(corpus.subjects())} subjects, "
          f"{corpus.num_classes} classes [config {chash}]")
    print("splits: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    if args.dry_run:
        print(f"plan: write normalized manifest to {args.out or '<out>'}/manifest.tsv")
        return 0
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(corpus, out / "manifest.tsv")
    print(f"wrote {out / 'manifest.tsv'}")
    return 0


def cmd_features(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.corpus)
    ids = [rec.id for rec in corpus.records]
    if args.from_file is not None:
        feats = load_features(args.from_file)
        missing = [rid for rid in ids if rid not in feats]
        if missing:
            raise ValidationError(
                f"external features missing {len(missing)} corpus ids, "
                f"first few: {missing[:5]}"
            )
        feats = {rid: feats[rid] for rid in ids}
        source = f"passthrough of {args.from_file}"
    else:
        records = list(corpus.records)
        def describe(rec):
            return compute_descriptor(corpus.load_image(rec), image_id=rec.id)
        vectors = parallel_map(describe, records, threads=args.threads)
        feats = {fv.image_id: fv for fv in vectors}
        source = "built-in descriptor"
    dim = next(iter(feats.values())).dim
    if args.dry_run:
        print(f"plan: write {len(feats)} feature vectors (dim {dim}, {source}) "
              f"to {args.out or '<out>'}/features.slrf [config {chash}]")
        return 0
    out = _require_out(args)
    save_features(feats, out / "features.slrf")
    print(f"wrote {len(feats)} feature vectors (dim {dim}, {source}) "
          f"to {out / 'features.slrf'} [config {chash}]")
    return 0


def cmd_pair(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.corpus)
    feats = load_features(args.features)
    tau = cfg["pairing"]["tau_min"]
    if args.random:
        count = args.count if args.count is not None else cfg["pairing"]["random_count"]
        if args.dry_run:
            print(f"plan: draw {count} random pairs per labeled image [config {chash}]")
            return 0
        pairset = random_pairs(corpus, feats, count_per_label=count, seed=cfg["seed"])
    else:
        pcfg = PairingConfig(tau_min=tau, use_pca=cfg["features"]["use_pca"],
                             pca_k=cfg["features"]["pca_k"])
        if args.dry_run:
            print(f"plan: build pairs (tau_min={tau}, "
                  f"pca={'on' if pcfg.use_pca else 'off'}) [config {chash}]")
            return 0
        pairset = build_pairs(corpus, feats, pcfg, threads=args.threads)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    save_pairs(pairset, out / "pairs.tsv", config_hash=chash, tau_min=tau)
    print(f"wrote {len(pairset)} pairs to {out / 'pairs.tsv'} [config {chash}]")
    return 0


def cmd_pair_eval(args) -> int:
    cfg, chash = _setup(args)
    pairset = load_pairs(args.pairs)
    oracle = load_oracle(args.oracle)
    report = evaluate_pairs(pairset, oracle)
    labeled_masks = [oracle.lookup(rid)[0] for rid in oracle.labeled_ids()]
    edges, density, n_hist = pair_iou_histogram(labeled_masks, bins=args.bins,
                                                num_classes=oracle.num_classes)
    print(f"pairs evaluated: {report.n_pairs}")
    print(f"same_class_fraction: {report.same_class_fraction:.4f}")
    print(f"pair_iou mean/median: {report.iou_mean:.4f} / {report.iou_median:.4f}")
    print(f"baseline ({report.baseline_n_pairs} same-class labeled pairs) "
          f"mean/median: {report.baseline_iou_mean:.4f} / {report.baseline_iou_median:.4f}")
    if args.dry_run:
        print(f"plan: write pair_quality.csv and iou_histogram.csv ({n_hist} pairs binned)")
        return 0
    out = _require_out(args)
    emit_report(out, pair_quality=report.as_row(),
                iou_histogram=(edges, density), config_hash=chash)
    print(f"wrote report files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.corpus)
    tcfg = _train_config(cfg)
    pairset = None
    if tcfg.use_pairs:
        if args.pairs is None:
            raise ValidationError("--pairs is required unless --no-pairs is given")
        pairset = load_pairs(args.pairs)
    if args.dry_run:
        n_pairs = len(pairset) if pairset else 0
        print(f"plan: train {tcfg.epochs} epochs (batch {tcfg.batch_size}, "
              f"{n_pairs} pairs, seed {tcfg.seed}) [config {chash}]")
        return 0
    out = _require_out(args)
    result = train(corpus, pairset, tcfg, out_dir=out, config_hash=chash,
                   resume_from=args.resume)
    if result.best_val_miou is not None:
        print(f"best val mIoU {result.best_val_miou:.4f} at epoch {result.best_epoch}")
    print(f"wrote metrics and checkpoints to {out} [config {chash}]")
    return 0


def cmd_eval(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.corpus)
    ckpt = load_checkpoint(args.checkpoint)
    net = net_from_checkpoint(ckpt)
    resolution = ckpt["config"]["resolution"]
    records = sorted((r for r in corpus.records if r.split == args.split),
                     key=lambda r: r.sort_key())
    if not records:
        raise ValidationError(f"no records in split {args.split!r}")
    cm = ConfusionMatrix(corpus.num_classes)
    for rec in records:
        img = resize_image(corpus.load_image(rec).astype(np.float64) / 255.0,
                           resolution, resolution)
        mask = resize_mask(corpus.load_mask(rec).data, resolution, resolution)
        probs, _ = net.forward(img)
        accumulate(cm, probs.argmax(axis=-1), mask)
    scores = seg_metrics(cm)
    print(f"{args.split}: mIoU {scores.mean_iou:.4f} pixel_acc {scores.pixel_acc:.4f} "
          f"({len(records)} images) [config {chash}]")
    per_class = {name: (float(v) if np.isfinite(v) else None)
                 for name, v in zip(corpus.class_names, scores.per_class_iou)}
    for name, iou in per_class.items():
        print(f"  {name}: {'NA' if iou is None else f'{iou:.4f}'}")
    if args.dry_run:
        print("plan: write per_class_iou.csv")
        return 0
    out = _require_out(args)
    emit_report(out, per_class_iou=per_class, config_hash=chash)
    print(f"wrote report files to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg, chash = _setup(args)
    corpus = load_manifest(args.corpus)
    feats = load_features(args.features)
    seeds = list(range(args.seeds)) if args.seeds is not None else list(cfg["ablate"]["seeds"])
    tcfg = _train_config(cfg)
    pcfg = PairingConfig(tau_min=cfg["pairing"]["tau_min"],
                         use_pca=cfg["features"]["use_pca"],
                         pca_k=cfg["features"]["pca_k"])
    if args.dry_run:
        print(f"plan: 6-run grid x {len(seeds)} seeds ({tcfg.epochs} epochs each) "
              f"[config {chash}]")
        return 0
    out = _require_out(args)
    run_rows, grid_rows = run_ablation(
        corpus, feats, seeds, tcfg, pairing_config=pcfg,
        random_count=cfg["pairing"]["random_count"], out_dir=out,
        config_hash=chash, threads=args.threads,
    )
    emit_report(out, ablation_grid=grid_rows, ablation_runs=run_rows,
                config_hash=chash)
    print(f"ablation grid over seeds {seeds} [config {chash}]:")
    for row in grid_rows:
        miou = "NA" if row["miou"] is None else f"{row['miou']:.4f}"
        macc = "NA" if row["macc"] is None else f"{row['macc']:.4f}"
        print(f"  {row['run']:<18} mIoU {miou}  mAcc {macc}")
    print(f"wrote report files to {out}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "pair": cmd_pair,
    "pair-eval": cmd_pair_eval,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except SlrkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
