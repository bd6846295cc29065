"""Corpus ingestion and indexing.

A corpus is a flat list of image records keyed by (subject, day, index) with
optional per-record masks and a train/val/test/unlabeled split. The on-disk
manifest is line-oriented, tab-separated UTF-8:

    id  subject_id  day  index  image_path  mask_path_or_dash  split

Lines starting with ``#`` are comments; a ``# classes: a,b,c`` directive
(optional) declares the class names so downstream consumers know C without
scanning masks.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import netpbm
from .errors import ManifestError, ValidationError
from .util import atomic_write_text

SPLITS = ("train", "val", "test", "unlabeled")
LABELED_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    subject_id: str
    day: int
    index: int
    image_path: str
    mask_path: str | None
    split: str

    def sort_key(self) -> tuple:
        return (self.subject_id, self.day, self.index, self.id)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class indices; every value must be < num_classes."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {data.shape}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if data.size and int(data.max()) >= self.num_classes:
            raise ValidationError(
                f"mask contains class {int(data.max())} >= num_classes {self.num_classes}"
            )
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def class_set(self) -> frozenset[int]:
        return frozenset(int(v) for v in np.unique(self.data))


class Corpus:
    """Immutable after construction; safe for concurrent readers."""

    def __init__(self, records: list[ImageRecord], class_names: list[str],
                 base_dir: Path | str | None = None):
        self.records = list(records)
        self.class_names = list(class_names)
        self.base_dir = Path(base_dir) if base_dir is not None else Path(".")
        if len(self.class_names) < 2:
            raise ValidationError("a corpus needs at least 2 classes (background + 1)")
        self._by_id: dict[str, ImageRecord] = {}
        self._day_index: dict[str, dict[int, list[ImageRecord]]] = {}
        seen_keys: set[tuple[str, int, int]] = set()
        for rec in self.records:
            _check_record(rec)
            key = (rec.subject_id, rec.day, rec.index)
            if key in seen_keys:
                raise ManifestError(f"duplicate (subject, day, index) key {key}")
            seen_keys.add(key)
            if rec.id in self._by_id:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            self._by_id[rec.id] = rec
            self._day_index.setdefault(rec.subject_id, {}).setdefault(rec.day, []).append(rec)
        for days in self._day_index.values():
            for recs in days.values():
                recs.sort(key=lambda r: (r.index, r.id))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id!r}") from None

    def subjects(self) -> list[str]:
        return sorted(self._day_index)

    def days(self, subject_id: str) -> list[int]:
        if subject_id not in self._day_index:
            raise ValidationError(f"unknown subject {subject_id!r}")
        return sorted(self._day_index[subject_id])

    def records_on_day(self, subject_id: str, day: int) -> list[ImageRecord]:
        if subject_id not in self._day_index:
            raise ValidationError(f"unknown subject {subject_id!r}")
        return list(self._day_index[subject_id].get(day, []))

    def resolve(self, rel_path: str) -> Path:
        p = Path(rel_path)
        return p if p.is_absolute() else self.base_dir / p

    def load_image(self, rec: ImageRecord) -> np.ndarray:
        return netpbm.read_ppm(self.resolve(rec.image_path))

    def load_mask(self, rec: ImageRecord) -> LabelMask:
        if rec.mask_path is None:
            raise ValidationError(f"record {rec.id!r} carries no mask")
        return LabelMask(netpbm.read_pgm(self.resolve(rec.mask_path)), self.num_classes)


def _check_record(rec: ImageRecord) -> None:
    if rec.day < 1:
        raise ManifestError(f"record {rec.id!r}: day must be >= 1, got {rec.day}")
    if rec.index < 1:
        raise ManifestError(f"record {rec.id!r}: index must be >= 1, got {rec.index}")
    if rec.split not in SPLITS:
        raise ManifestError(f"record {rec.id!r}: unknown split {rec.split!r}")
    if rec.split == "unlabeled" and rec.mask_path is not None:
        raise ManifestError(f"record {rec.id!r}: unlabeled records must not carry a mask")
    if rec.split in LABELED_SPLITS and rec.mask_path is None:
        raise ManifestError(f"record {rec.id!r}: split {rec.split!r} requires a mask")
    for field in (rec.id, rec.subject_id, rec.image_path, rec.mask_path or "-"):
        if not field or any(c in field for c in "\t\n\r"):
            raise ManifestError(f"record {rec.id!r}: field {field!r} empty or contains tabs/newlines")


def parse_manifest_line(line: str, lineno: int, n_fields: int = 7) -> list[str]:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != n_fields:
        raise ManifestError(f"line {lineno}: expected {n_fields} tab-separated fields, got {len(fields)}")
    return fields


def _parse_classes_directive(line: str) -> list[str] | None:
    body = line.lstrip("#").strip()
    if body.lower().startswith("classes:"):
        names = [n.strip() for n in body.split(":", 1)[1].split(",")]
        if any(not n for n in names):
            raise ManifestError("empty class name in classes directive")
        return names
    return None


def load_manifest(path: Path | str, class_names: list[str] | None = None,
                  validate_files: bool = True) -> Corpus:
    """Parse and validate a manifest into a Corpus.

    Class names come from the argument, else a ``# classes:`` directive, else
    they are derived by scanning the referenced masks (background + highest
    class index seen). With validate_files, every referenced image and mask is
    read fully and masks must match their image dimensions.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    directive: list[str] | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                found = _parse_classes_directive(line)
                if found is not None:
                    directive = found
                continue
            fields = parse_manifest_line(line, lineno)
            rec_id, subject_id, day_s, index_s, image_path, mask_field, split = fields
            try:
                day = int(day_s)
                index = int(index_s)
            except ValueError:
                raise ManifestError(f"line {lineno}: day/index must be integers") from None
            rec = ImageRecord(
                id=rec_id, subject_id=subject_id, day=day, index=index,
                image_path=image_path,
                mask_path=None if mask_field == "-" else mask_field,
                split=split,
            )
            try:
                _check_record(rec)
            except ManifestError as e:
                raise ManifestError(f"line {lineno}: {e}") from None
            records.append(rec)

    names = class_names if class_names is not None else directive
    base_dir = path.parent
    if validate_files:
        max_class = _validate_files(records, base_dir, len(names) if names else None)
        if names is None:
            names = ["background"] + [f"class_{i}" for i in range(1, max(max_class, 1) + 1)]
    elif names is None:
        raise ManifestError(
            "class names not declared: pass class_names, add a '# classes:' "
            "directive, or enable file validation to derive them"
        )
    return Corpus(records, names, base_dir=base_dir)


def _validate_files(records: list[ImageRecord], base_dir: Path, num_classes: int | None) -> int:
    max_class = 0
    for rec in records:
        image_path = base_dir / rec.image_path if not Path(rec.image_path).is_absolute() else Path(rec.image_path)
        if not image_path.exists():
            raise ManifestError(f"record {rec.id!r}: image file missing: {image_path}")
        image = netpbm.read_ppm(image_path)
        if rec.mask_path is not None:
            mask_path = base_dir / rec.mask_path if not Path(rec.mask_path).is_absolute() else Path(rec.mask_path)
            if not mask_path.exists():
                raise ManifestError(f"record {rec.id!r}: mask file missing: {mask_path}")
            mask = netpbm.read_pgm(mask_path)
            if mask.shape != image.shape[:2]:
                raise ManifestError(
                    f"record {rec.id!r}: mask shape {mask.shape} != image shape {image.shape[:2]}"
                )
            top = int(mask.max()) if mask.size else 0
            max_class = max(max_class, top)
            if num_classes is not None and top >= num_classes:
                raise ManifestError(
                    f"record {rec.id!r}: mask class {top} >= declared class count {num_classes}"
                )
    return max_class


def save_manifest(corpus: Corpus, path: Path | str) -> None:
    """Inverse of load_manifest: field-for-field round trip in record order."""
    lines = ["# classes: " + ",".join(corpus.class_names)]
    for rec in corpus.records:
        lines.append("\t".join([
            rec.id, rec.subject_id, str(rec.day), str(rec.index),
            rec.image_path, rec.mask_path if rec.mask_path is not None else "-",
            rec.split,
        ]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def neighboring_days(corpus: Corpus, subject_id: str, day: int) -> list[int]:
    """Days adjacent to `day` in the subject's sorted distinct-day sequence.

    Adjacency is positional (intervals between photographed days are not
    uniform), so the result is the nearest strictly-earlier and
    strictly-later days that exist: 0, 1 or 2 entries.
    """
    days = corpus.days(subject_id)
    out = []
    earlier = [d for d in days if d < day]
    later = [d for d in days if d > day]
    if earlier:
        out.append(earlier[-1])
    if later:
        out.append(later[0])
    return out


def split_counts(corpus: Corpus) -> dict[str, int]:
    counts = Counter(rec.split for rec in corpus.records)
    return {split: counts.get(split, 0) for split in SPLITS}
