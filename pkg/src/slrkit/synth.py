"""Synthetic evolving-subject corpus generator.

Each subject is a set of parametric blobs (one shape family per foreground
class) over a procedurally textured background. Blob parameters drift
smoothly from day to day and blobs shrink (some all the way to extinction),
so images of neighboring days stay similar while the subject's appearance
changes over its full timeline. Reused annotations between neighboring days
are therefore approximately, not perfectly, aligned.

Every image gets an exact mask. The manifest keeps masks only for a
label_fraction of train images (the rest become split=unlabeled); the
oracle file retains masks and class sets for everything, which makes pair
quality and training claims testable without human annotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm
from .corpus import Corpus, ImageRecord, LabelMask, load_manifest, parse_manifest_line
from .errors import ManifestError, ValidationError
from .util import atomic_write_text, parallel_map

SPLIT_RATIOS = (0.6, 0.2, 0.2)  # train / val / test

_PALETTE = np.array([
    [205, 72, 60],    # class 1: warm red
    [62, 96, 205],    # class 2: blue
    [72, 180, 84],    # class 3: green
    [214, 198, 66],   # class 4: yellow
    [164, 74, 196],   # class 5: purple
], dtype=np.float64)

_FAMILIES = ("ellipse", "rectangle", "diamond", "annulus", "cross")


@dataclass(frozen=True)
class SynthConfig:
    subjects: int = 5
    days_per_subject: int = 20
    images_per_day: int = 2
    classes: int = 4
    image_size: int = 64
    evolution_rate: float = 0.15
    label_fraction: float = 0.25
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValidationError(f"classes must be >= 2, got {self.classes}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValidationError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if not 0.0 <= self.evolution_rate <= 1.0:
            raise ValidationError(f"evolution_rate must be in [0, 1], got {self.evolution_rate}")
        if min(self.subjects, self.days_per_subject, self.images_per_day) < 1:
            raise ValidationError("subjects, days and images per day must all be >= 1")
        if self.image_size < 8:
            raise ValidationError(f"image_size must be >= 8, got {self.image_size}")
        if self.noise_level < 0:
            raise ValidationError(f"noise_level must be >= 0, got {self.noise_level}")


@dataclass
class OracleEntry:
    image_id: str
    subject_id: str
    day: int
    index: int
    image_path: str
    mask_path: str
    split: str
    class_set: frozenset[int]


class Oracle:
    """Ground truth for every generated image, including unlabeled ones."""

    def __init__(self, entries: list[OracleEntry], class_names: list[str],
                 base_dir: Path | str = "."):
        self.entries = {e.image_id: e for e in entries}
        self.class_names = list(class_names)
        self.base_dir = Path(base_dir)
        self._mask_cache: dict[str, LabelMask] = {}

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def lookup(self, image_id: str) -> tuple[LabelMask, frozenset[int]]:
        if image_id not in self.entries:
            raise ValidationError(f"oracle has no entry for id {image_id!r}")
        entry = self.entries[image_id]
        if image_id not in self._mask_cache:
            path = Path(entry.mask_path)
            if not path.is_absolute():
                path = self.base_dir / path
            self._mask_cache[image_id] = LabelMask(netpbm.read_pgm(path), self.num_classes)
        return self._mask_cache[image_id], entry.class_set

    def labeled_ids(self) -> list[str]:
        return sorted(e.image_id for e in self.entries.values() if e.split != "unlabeled")

    def ids(self) -> list[str]:
        return sorted(self.entries)


def oracle_lookup(oracle: Oracle, image_id: str) -> tuple[LabelMask, frozenset[int]]:
    return oracle.lookup(image_id)


def _blob_mask(family: str, size: int, cx: float, cy: float,
               a: float, b: float, angle: float) -> np.ndarray:
    if a < 0.75 or b < 0.75:
        return np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    if family == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if family == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if family == "diamond":
        return np.abs(u) / a + np.abs(v) / b <= 1.0
    if family == "annulus":
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        return (rho >= 0.55) & (rho <= 1.0)
    if family == "cross":
        return ((np.abs(u) <= 0.35 * a) & (np.abs(v) <= b)) | \
               ((np.abs(v) <= 0.35 * b) & (np.abs(u) <= a))
    raise ValidationError(f"unknown shape family {family!r}")


@dataclass
class _SubjectImage:
    subject_id: str
    day: int
    index: int
    image: np.ndarray
    mask: np.ndarray
    class_set: frozenset[int]


def _render_subject(subject_id: str, cfg: SynthConfig, seed_seq: np.random.SeedSequence
                    ) -> list[_SubjectImage]:
    rng = np.random.default_rng(seed_seq)
    size = cfg.image_size
    er = cfg.evolution_rate
    n_fg = cfg.classes - 1
    days = cfg.days_per_subject

    bg_color = np.array([110.0, 100.0, 90.0]) + rng.uniform(-25, 25, size=3)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(1.5, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    texture *= cfg.noise_level * 60.0 / 3.0

    blobs = []
    layout_rotation = rng.uniform(0, 2 * np.pi)
    for c in range(1, cfg.classes):
        theta = layout_rotation + 2 * np.pi * (c - 1) / max(n_fg, 1) + rng.uniform(-0.3, 0.3)
        radius = rng.uniform(0.16, 0.32) * size
        center = np.array([
            size / 2 + radius * np.cos(theta),
            size / 2 + radius * np.sin(theta),
        ]) if n_fg > 1 else np.array([size / 2.0, size / 2.0]) + rng.uniform(-6, 6, size=2)
        a = rng.uniform(0.13, 0.19) * size
        aspect = rng.uniform(0.55, 0.95)
        vanishes = rng.random() < min(0.45, 1.5 * er)
        vanish_at = rng.uniform(0.55, 0.95)
        end_scale = 1.0 - er * rng.uniform(0.3, 0.9)
        blobs.append({
            "family": _FAMILIES[(c - 1) % len(_FAMILIES)],
            "center": center,
            "a": a,
            "b": a * aspect,
            "angle": rng.uniform(0, 2 * np.pi),
            "color": _PALETTE[(c - 1) % len(_PALETTE)] + rng.uniform(-18, 18, size=3),
            "vanishes": vanishes,
            "vanish_at": vanish_at,
            "end_scale": end_scale,
        })

    images: list[_SubjectImage] = []
    light = 1.0
    for t in range(days):
        frac = t / (days - 1) if days > 1 else 0.0
        if t > 0:
            # day-to-day random walk, magnitude tied to the evolution rate;
            # the per-day factor makes drift bursty (quiet days keep chains alive)
            day_factor = float(np.exp(0.9 * rng.standard_normal()))
            light = float(np.clip(light + er * 0.10 * rng.standard_normal(), 0.75, 1.25))
            for blob in blobs:
                blob["center"] = np.clip(
                    blob["center"] + er * size * 0.035 * day_factor * rng.standard_normal(2),
                    0.18 * size, 0.82 * size,
                )
                blob["angle"] += er * 0.25 * day_factor * rng.standard_normal()
                blob["color"] = np.clip(
                    blob["color"] + er * 20.0 * rng.standard_normal(3), 20, 235
                )
        for n in range(1, cfg.images_per_day + 1):
            jitter_c = er * size * 0.010 * rng.standard_normal(2)
            jitter_ang = er * 0.05 * rng.standard_normal()
            mask = np.zeros((size, size), dtype=np.uint8)
            img = np.empty((size, size, 3))
            img[:] = bg_color * light
            img += texture[:, :, None]
            for c, blob in enumerate(blobs, start=1):
                if blob["vanishes"]:
                    scale = max(0.0, 1.0 - frac / blob["vanish_at"])
                else:
                    scale = 1.0 + (blob["end_scale"] - 1.0) * frac
                if scale <= 0.0:
                    continue
                region = _blob_mask(
                    blob["family"], size,
                    blob["center"][0] + jitter_c[0], blob["center"][1] + jitter_c[1],
                    blob["a"] * scale, blob["b"] * scale,
                    blob["angle"] + jitter_ang,
                )
                if not region.any():
                    continue
                mask[region] = c
                shade = 0.8 + 0.4 * (yy[region] + xx[region]) / 2.0
                img[region] = blob["color"] * light * shade[:, None] + 0.5 * texture[region][:, None]
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            images.append(_SubjectImage(
                subject_id=subject_id, day=t + 1, index=n,
                image=img, mask=mask,
                class_set=frozenset(int(v) for v in np.unique(mask)),
            ))
    return images


def _assign_splits(images: list[_SubjectImage], cfg: SynthConfig,
                   rng: np.random.Generator) -> dict[tuple[str, int, int], str]:
    """Per-subject 60/20/20 split, then a label_fraction of each subject's
    train images keep their masks; the remaining train images are emitted
    as unlabeled."""
    splits: dict[tuple[str, int, int], str] = {}
    by_subject: dict[str, list[_SubjectImage]] = {}
    for im in images:
        by_subject.setdefault(im.subject_id, []).append(im)
    for subject_id in sorted(by_subject):
        imgs = sorted(by_subject[subject_id], key=lambda im: (im.day, im.index))
        n = len(imgs)
        order = rng.permutation(n)
        n_val = int(round(SPLIT_RATIOS[1] * n))
        n_test = int(round(SPLIT_RATIOS[2] * n))
        n_train = n - n_val - n_test
        assignment = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        base = {}
        for pos, split in zip(order, assignment):
            im = imgs[pos]
            base[(im.subject_id, im.day, im.index)] = split
        train_keys = [k for k in sorted(base) if base[k] == "train"]
        if train_keys:
            keep = max(1, int(round(cfg.label_fraction * len(train_keys))))
            kept = set(
                train_keys[i] for i in rng.choice(len(train_keys), size=keep, replace=False)
            )
            for k in train_keys:
                if k not in kept:
                    base[k] = "unlabeled"
        splits.update(base)
    return splits


def generate(cfg: SynthConfig, out_dir: Path | str,
             threads: int | None = None) -> tuple[Corpus, Oracle]:
    """Render the corpus to out_dir and return it with its oracle.

    Deterministic: the same config (seed included) regenerates byte-identical
    files. Subjects render independently, so per-subject parallelism does not
    affect the output.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(cfg.seed)
    child_seeds = root.spawn(cfg.subjects + 1)
    subject_ids = [f"s{idx:02d}" for idx in range(1, cfg.subjects + 1)]
    rendered = parallel_map(
        lambda pair: _render_subject(pair[0], cfg, pair[1]),
        list(zip(subject_ids, child_seeds[:-1])),
        threads=threads,
    )
    images = [im for batch in rendered for im in batch]
    splits = _assign_splits(images, cfg, np.random.default_rng(child_seeds[-1]))

    class_names = ["background"] + [f"class_{i}" for i in range(1, cfg.classes)]
    manifest_lines = ["# classes: " + ",".join(class_names)]
    oracle_lines = ["# classes: " + ",".join(class_names)]
    oracle_entries: list[OracleEntry] = []
    for im in sorted(images, key=lambda im: (im.subject_id, im.day, im.index)):
        image_id = f"{im.subject_id}_d{im.day:03d}_n{im.index}"
        image_rel = f"images/{image_id}.ppm"
        mask_rel = f"masks/{image_id}.pgm"
        netpbm.write_ppm(out_dir / image_rel, im.image)
        netpbm.write_pgm(out_dir / mask_rel, im.mask)
        split = splits[(im.subject_id, im.day, im.index)]
        mask_field = mask_rel if split != "unlabeled" else "-"
        manifest_lines.append("\t".join([
            image_id, im.subject_id, str(im.day), str(im.index),
            image_rel, mask_field, split,
        ]))
        classes_field = ",".join(str(c) for c in sorted(im.class_set))
        oracle_lines.append("\t".join([
            image_id, im.subject_id, str(im.day), str(im.index),
            image_rel, mask_rel, split, classes_field,
        ]))
        oracle_entries.append(OracleEntry(
            image_id=image_id, subject_id=im.subject_id, day=im.day, index=im.index,
            image_path=image_rel, mask_path=mask_rel, split=split,
            class_set=im.class_set,
        ))

    atomic_write_text(out_dir / "manifest.tsv", "\n".join(manifest_lines) + "\n")
    atomic_write_text(out_dir / "oracle.tsv", "\n".join(oracle_lines) + "\n")

    corpus = load_manifest(out_dir / "manifest.tsv")
    oracle = Oracle(oracle_entries, class_names, base_dir=out_dir)
    return corpus, oracle


def load_oracle(path: Path | str) -> Oracle:
    """Parse an oracle file (manifest syntax plus a trailing classes column)."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"oracle file not found: {path}")
    entries: list[OracleEntry] = []
    class_names: list[str] | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.lower().startswith("classes:"):
                    class_names = [n.strip() for n in body.split(":", 1)[1].split(",")]
                continue
            fields = parse_manifest_line(line, lineno, n_fields=8)
            image_id, subject_id, day_s, index_s, image_path, mask_path, split, classes_s = fields
            try:
                class_set = frozenset(int(c) for c in classes_s.split(",") if c != "")
            except ValueError:
                raise ManifestError(f"line {lineno}: bad classes field {classes_s!r}") from None
            entries.append(OracleEntry(
                image_id=image_id, subject_id=subject_id,
                day=int(day_s), index=int(index_s),
                image_path=image_path, mask_path=mask_path, split=split,
                class_set=class_set,
            ))
    if class_names is None:
        raise ManifestError(f"{path}: oracle file lacks a '# classes:' directive")
    return Oracle(entries, class_names, base_dir=path.parent)
