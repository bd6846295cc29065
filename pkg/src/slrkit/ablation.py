"""Ablation harness: the six-run grid (supervised baseline, raw pairs, each
weight alone, both weights, random pairs) trained over one or more seeds,
with per-seed rows and a seed-averaged grid."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .features import FeatureVector
from .pairing import PairingConfig, PairSet, build_pairs, random_pairs
from .trainer import TrainConfig, train

GRID_RUNS = (
    ("supervised", {"use_pairs": False, "use_eta": False, "use_lambda": False}),
    ("pairs", {"use_pairs": True, "use_eta": False, "use_lambda": False}),
    ("pairs_eta", {"use_pairs": True, "use_eta": True, "use_lambda": False}),
    ("pairs_lambda", {"use_pairs": True, "use_eta": False, "use_lambda": True}),
    ("pairs_eta_lambda", {"use_pairs": True, "use_eta": True, "use_lambda": True}),
    ("pairs_random", {"use_pairs": True, "use_eta": True, "use_lambda": True}),
)


def run_ablation(corpus: Corpus, featstore: dict[str, FeatureVector],
                 seeds: list[int], base_config: TrainConfig,
                 pairing_config: PairingConfig | None = None,
                 random_count: int = 1,
                 out_dir: Path | str | None = None,
                 config_hash: str = "",
                 threads: int | None = None) -> tuple[list[dict], list[dict]]:
    """Returns (per_run_rows, aggregated_grid_rows); optionally writes each
    run's metrics under out_dir/runs/<run>_<seed>/."""
    informed = build_pairs(corpus, featstore, pairing_config, threads=threads)
    run_rows: list[dict] = []
    for seed in seeds:
        rand = random_pairs(corpus, featstore, count_per_label=random_count, seed=seed)
        for run_name, flags in GRID_RUNS:
            cfg = replace(base_config, seed=seed, **flags)
            pairs: PairSet | None = None
            if flags["use_pairs"]:
                pairs = rand if run_name == "pairs_random" else informed
            run_out = Path(out_dir) / "runs" / f"{run_name}_{seed}" if out_dir else None
            result = train(corpus, pairs, cfg, out_dir=run_out, config_hash=config_hash)
            run_rows.append({
                "run": run_name, "seed": seed,
                "miou": result.best_val_miou,
                "macc": _best_val_pixacc(result),
            })

    grid_rows: list[dict] = []
    for run_name, _ in GRID_RUNS:
        mious = [r["miou"] for r in run_rows if r["run"] == run_name and r["miou"] is not None]
        maccs = [r["macc"] for r in run_rows if r["run"] == run_name and r["macc"] is not None]
        grid_rows.append({
            "run": run_name,
            "miou": float(np.mean(mious)) if mious else None,
            "macc": float(np.mean(maccs)) if maccs else None,
        })
    return run_rows, grid_rows


def _best_val_pixacc(result) -> float | None:
    if result.best_epoch is None:
        return None
    for row in result.epoch_rows:
        if row["epoch"] == result.best_epoch:
            return row["val_pixacc"]
    return None
