"""Label-reuse pairing: recursive neighbor matching with an
average-similarity stopping rule, a random-pair baseline, and pair quality
evaluation against ground truth.

Matching starts from every labeled train image (a "seed"). At each step the
search looks at the days immediately before and after the current reference
image, takes the unvisited image of each day most similar to the reference
(cosine similarity of PCA-reduced features), and accepts it if that
similarity is at least the running average of similarities already accepted
for the seed (and at least tau_min). Accepted matches become new reference
points, so chains can track a subject across its whole timeline; a branch
stops as soon as its best candidate falls below the running average.

Matched images that themselves carry labels are dropped at pair-emission
time, and an unlabeled image claimed by several seeds is assigned to the
claim with the highest similarity (ties break toward the smaller seed id),
so pseudo ids are unique across the returned set.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, ImageRecord, neighboring_days
from .errors import FeatureError, PairingError, PcaError, ValidationError
from .features import FeatureVector, cosine_similarity, fit_pca, project
from .metrics import mask_iou
from .util import atomic_write_text, parallel_map

ELIGIBLE_SPLITS = ("train", "unlabeled")


@dataclass(frozen=True)
class Pair:
    labeled_id: str
    pseudo_id: str
    similarity: float
    hop_count: int


class PairSet:
    def __init__(self, pairs: list[Pair]):
        self.pairs = list(pairs)
        seen: set[str] = set()
        for p in self.pairs:
            if p.hop_count < 1:
                raise PairingError(f"pair {p.labeled_id}->{p.pseudo_id}: hop_count must be >= 1")
            if p.pseudo_id in seen:
                raise PairingError(f"pseudo id {p.pseudo_id!r} appears twice in the pair set")
            seen.add(p.pseudo_id)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __eq__(self, other) -> bool:
        return isinstance(other, PairSet) and self.pairs == other.pairs

    def validate_against(self, corpus: Corpus) -> None:
        for p in self.pairs:
            labeled = corpus.record(p.labeled_id)
            pseudo = corpus.record(p.pseudo_id)
            if labeled.split != "train" or labeled.mask_path is None:
                raise PairingError(f"labeled id {p.labeled_id!r} is not a masked train record")
            if pseudo.split != "unlabeled":
                raise PairingError(f"pseudo id {p.pseudo_id!r} is not an unlabeled record")


@dataclass(frozen=True)
class PairingConfig:
    tau_min: float = 0.0
    use_pca: bool = True
    pca_k: int = 256


class MatchState:
    """Per-seed bookkeeping: accepted matches (with similarity and chain
    depth), the visited set, and the running average similarity. The average
    over an empty match set is defined as tau_min, so a seed's first best
    match is accepted whenever it clears the floor."""

    def __init__(self, tau_min: float = 0.0):
        self.tau_min = tau_min
        self.matches: dict[str, list[tuple[str, float, int]]] = {}
        self.visited: dict[str, set[str]] = {}
        self._sums: dict[str, float] = {}

    def ensure_seed(self, seed_id: str) -> None:
        if seed_id not in self.matches:
            self.matches[seed_id] = []
            self.visited[seed_id] = {seed_id}
            self._sums[seed_id] = 0.0

    def avg_sim(self, seed_id: str) -> float:
        accepted = self.matches[seed_id]
        if not accepted:
            return self.tau_min
        return self._sums[seed_id] / len(accepted)

    def accept(self, seed_id: str, match_id: str, sim: float, hop: int) -> None:
        self.matches[seed_id].append((match_id, sim, hop))
        self.visited[seed_id].add(match_id)
        self._sums[seed_id] += sim

    def hop_of(self, seed_id: str, ref_id: str) -> int:
        if ref_id == seed_id:
            return 0
        for match_id, _, hop in self.matches[seed_id]:
            if match_id == ref_id:
                return hop
        raise PairingError(f"{ref_id!r} was never accepted for seed {seed_id!r}")


class _Engine:
    """Shared read-only context for one pairing run: reduced vectors, cached
    norms, and per-(subject, day) candidate lists in tie-break order."""

    def __init__(self, corpus: Corpus, vectors: dict[str, np.ndarray], tau_min: float):
        self.corpus = corpus
        self.tau_min = tau_min
        self.vectors = vectors
        self.norms = {rid: float(np.linalg.norm(v)) for rid, v in vectors.items()}
        for rid, norm in self.norms.items():
            if norm == 0.0:
                raise FeatureError(f"{rid!r}: zero-norm feature (cosine undefined)")
        self.day_members: dict[tuple[str, int], list[str]] = {}
        for rec in corpus.records:
            if rec.split in ELIGIBLE_SPLITS:
                self.day_members.setdefault((rec.subject_id, rec.day), []).append(rec.id)
        for key, members in self.day_members.items():
            members.sort(key=lambda rid: (corpus.record(rid).index, rid))

    def similarity(self, a: str, b: str) -> float:
        dot = float(np.dot(self.vectors[a], self.vectors[b]))
        return min(1.0, max(-1.0, dot / (self.norms[a] * self.norms[b])))

    def compare(self, seed_id: str, ref_id: str, state: MatchState,
                hop: int | None = None) -> None:
        ref = self.corpus.record(ref_id)
        if hop is None:
            hop = state.hop_of(seed_id, ref_id) + 1
        visited = state.visited[seed_id]
        for day in neighboring_days(self.corpus, ref.subject_id, ref.day):
            best_id = None
            best_sim = None
            for cand_id in self.day_members.get((ref.subject_id, day), []):
                if cand_id in visited:
                    continue
                if cand_id not in self.vectors:
                    raise PairingError(f"missing feature vector for candidate {cand_id!r}")
                s = self.similarity(ref_id, cand_id)
                if best_sim is None or s > best_sim:
                    best_sim = s
                    best_id = cand_id
            if best_id is None:
                continue
            if best_sim >= state.avg_sim(seed_id) and best_sim >= self.tau_min:
                state.accept(seed_id, best_id, best_sim, hop)
                self.compare(seed_id, best_id, state, hop + 1)


def reduce_features(corpus: Corpus, featstore: dict[str, FeatureVector],
                    config: PairingConfig) -> dict[str, np.ndarray]:
    """Vectors the matcher compares: raw, or PCA-reduced when enabled.

    The projection is fitted once on all corpus records present in the store.
    The requested dimension is clamped to what the sample supports; if the
    fit reports a rank below that, the fit is retried at the reported rank,
    and rank-0 input (all vectors identical) falls back to raw features.
    """
    if not config.use_pca:
        return {rid: fv.values for rid, fv in featstore.items()}
    fit_records = [r for r in sorted(corpus.records, key=lambda r: r.sort_key())
                   if r.id in featstore]
    vectors = [featstore[r.id] for r in fit_records]
    n = len(vectors)
    if n < 2:
        return {rid: fv.values for rid, fv in featstore.items()}
    d = vectors[0].dim
    k = min(config.pca_k, d, n - 1)
    if k < 1:
        return {rid: fv.values for rid, fv in featstore.items()}
    try:
        model = fit_pca(vectors, k)
    except PcaError as e:
        if e.rank is None or e.rank < 1:
            return {rid: fv.values for rid, fv in featstore.items()}
        model = fit_pca(vectors, e.rank)
    return {rid: project(model, fv).values for rid, fv in featstore.items()}


def compare(seed_id: str, ref_id: str, state: MatchState, corpus: Corpus,
            features: dict[str, FeatureVector] | dict[str, np.ndarray]) -> MatchState:
    """Run one matching expansion step (and its recursion) for a seed.

    `features` maps image ids to (already reduced) vectors; FeatureVector
    values are unwrapped. The acceptance floor is the state's tau_min.
    """
    vectors = {rid: (fv.values if isinstance(fv, FeatureVector) else np.asarray(fv))
               for rid, fv in features.items()}
    state.ensure_seed(seed_id)
    engine = _Engine(corpus, vectors, state.tau_min)
    engine.compare(seed_id, ref_id, state)
    return state


def build_pairs(corpus: Corpus, featstore: dict[str, FeatureVector],
                config: PairingConfig | None = None,
                threads: int | None = None) -> PairSet:
    """Run the matcher from every labeled train seed and emit unique pairs.

    Deterministic for a given (corpus, features, config): seeds are processed
    in sorted record order, within-day ties break by (index, id), and claim
    conflicts resolve to the highest similarity then the smaller seed id.
    """
    config = config or PairingConfig()
    eligible = [r for r in corpus.records if r.split in ELIGIBLE_SPLITS]
    seeds = sorted((r for r in eligible if r.split == "train"), key=lambda r: r.sort_key())
    if not seeds:
        raise PairingError("no labeled train records to seed pairing")
    missing = [r.id for r in eligible if r.id not in featstore]
    if missing:
        raise FeatureError(f"missing feature vectors for {len(missing)} records, "
                           f"first few: {missing[:5]}")

    vectors = reduce_features(corpus, featstore, config)
    engine = _Engine(corpus, vectors, config.tau_min)

    limit = 3 * len(corpus) + 1000
    if sys.getrecursionlimit() < limit:
        sys.setrecursionlimit(limit)

    by_subject: dict[str, list[ImageRecord]] = {}
    for seed in seeds:
        by_subject.setdefault(seed.subject_id, []).append(seed)

    def run_subject(subject_id: str) -> MatchState:
        state = MatchState(config.tau_min)
        for seed in by_subject[subject_id]:
            state.ensure_seed(seed.id)
            engine.compare(seed.id, seed.id, state)
        return state

    subject_states = parallel_map(run_subject, sorted(by_subject), threads=threads)
    state = MatchState(config.tau_min)
    for sub_state in subject_states:
        state.matches.update(sub_state.matches)
        state.visited.update(sub_state.visited)

    claims: dict[str, tuple[float, str, int]] = {}
    for seed in seeds:
        for match_id, sim, hop in state.matches[seed.id]:
            if corpus.record(match_id).split != "unlabeled":
                continue
            prev = claims.get(match_id)
            if prev is None or sim > prev[0] or (sim == prev[0] and seed.id < prev[1]):
                claims[match_id] = (sim, seed.id, hop)

    pairs = [Pair(labeled_id=seed_id, pseudo_id=pseudo_id, similarity=sim, hop_count=hop)
             for pseudo_id, (sim, seed_id, hop) in claims.items()]
    pairs.sort(key=lambda p: (p.labeled_id, p.pseudo_id))
    return PairSet(pairs)


def random_pairs(corpus: Corpus, featstore: dict[str, FeatureVector],
                 count_per_label: int, seed: int) -> PairSet:
    """Baseline: pair each labeled train image with uniformly drawn unlabeled
    images, without replacement across the whole set. The similarity field
    records the true cosine similarity of the raw features (informational)."""
    if count_per_label < 1:
        raise PairingError(f"count_per_label must be >= 1, got {count_per_label}")
    labeled = sorted((r for r in corpus.records if r.split == "train"),
                     key=lambda r: r.sort_key())
    pool = sorted(r.id for r in corpus.records if r.split == "unlabeled")
    if not labeled:
        raise PairingError("no labeled train records")
    if not pool:
        raise PairingError("no unlabeled records to sample from")
    needed = count_per_label * len(labeled)
    if needed > len(pool):
        raise PairingError(
            f"requested {needed} random pairs but only {len(pool)} unlabeled images exist"
        )
    rng = np.random.default_rng(seed)
    pairs: list[Pair] = []
    for rec in labeled:
        for _ in range(count_per_label):
            pick = int(rng.integers(len(pool)))
            pseudo_id = pool.pop(pick)
            if rec.id not in featstore or pseudo_id not in featstore:
                raise FeatureError(f"missing features for pair ({rec.id!r}, {pseudo_id!r})")
            sim = cosine_similarity(featstore[rec.id], featstore[pseudo_id])
            pairs.append(Pair(labeled_id=rec.id, pseudo_id=pseudo_id,
                              similarity=sim, hop_count=1))
    pairs.sort(key=lambda p: (p.labeled_id, p.pseudo_id))
    return PairSet(pairs)


@dataclass(frozen=True)
class PairQualityReport:
    n_pairs: int
    same_class_fraction: float
    iou_mean: float
    iou_median: float
    baseline_n_pairs: int
    baseline_iou_mean: float
    baseline_iou_median: float
    pair_ious: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))

    def as_row(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "same_class_fraction": self.same_class_fraction,
            "iou_mean": self.iou_mean,
            "iou_median": self.iou_median,
            "baseline_n_pairs": self.baseline_n_pairs,
            "baseline_iou_mean": self.baseline_iou_mean,
            "baseline_iou_median": self.baseline_iou_median,
        }


def evaluate_pairs(pairs: PairSet, oracle) -> PairQualityReport:
    """Score pairs against full ground truth: the fraction whose two images
    contain identical class sets, and mean/median mask IoU per pair, next to
    the all-same-class-pairs baseline over the labeled records."""
    num_classes = oracle.num_classes
    same = []
    ious = []
    for p in pairs:
        mask_l, cls_l = oracle.lookup(p.labeled_id)
        mask_p, cls_p = oracle.lookup(p.pseudo_id)
        same.append(cls_l == cls_p)
        ious.append(mask_iou(mask_l, mask_p, num_classes).mean_iou)
    ious_arr = np.asarray(ious, dtype=np.float64)

    labeled_ids = oracle.labeled_ids()
    baseline: list[float] = []
    entries = [(rid, *oracle.lookup(rid)) for rid in labeled_ids]
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            if entries[i][2] == entries[j][2]:
                baseline.append(mask_iou(entries[i][1], entries[j][1], num_classes).mean_iou)
    baseline_arr = np.asarray(baseline, dtype=np.float64)

    return PairQualityReport(
        n_pairs=len(pairs),
        same_class_fraction=float(np.mean(same)) if same else float("nan"),
        iou_mean=float(ious_arr.mean()) if len(ious_arr) else float("nan"),
        iou_median=float(np.median(ious_arr)) if len(ious_arr) else float("nan"),
        baseline_n_pairs=len(baseline_arr),
        baseline_iou_mean=float(baseline_arr.mean()) if len(baseline_arr) else float("nan"),
        baseline_iou_median=float(np.median(baseline_arr)) if len(baseline_arr) else float("nan"),
        pair_ious=ious_arr,
    )


def pair_iou_histogram(masks: list, bins: int,
                       num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray, int]:
    """Normalized histogram (uniform bin edges on [0, 1]) of mask IoU over
    all pairs of labeled masks sharing the same class set. Returns
    (edges, density, pair_count)."""
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    if len(masks) < 2:
        raise ValidationError("need at least 2 labeled masks")
    arrays = [np.asarray(getattr(m, "data", m)) for m in masks]
    class_sets = [frozenset(int(v) for v in np.unique(a)) for a in arrays]
    ious = []
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            if class_sets[i] == class_sets[j]:
                ious.append(mask_iou(arrays[i], arrays[j], num_classes).mean_iou)
    edges = np.linspace(0.0, 1.0, bins + 1)
    if ious:
        density, _ = np.histogram(np.asarray(ious), bins=edges, density=True)
    else:
        density = np.zeros(bins)
    return edges, density, len(ious)


def save_pairs(pairset: PairSet, path: Path | str, *,
               config_hash: str = "", tau_min: float = 0.0) -> None:
    lines = [f"# config={config_hash} tau_min={tau_min:.6g}"]
    for p in pairset:
        lines.append(f"{p.labeled_id}\t{p.pseudo_id}\t{p.similarity:.6f}\t{p.hop_count}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_pairs(path: Path | str) -> PairSet:
    path = Path(path)
    if not path.exists():
        raise PairingError(f"pairs file not found: {path}")
    pairs: list[Pair] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise PairingError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                pairs.append(Pair(labeled_id=fields[0], pseudo_id=fields[1],
                                  similarity=float(fields[2]), hop_count=int(fields[3])))
            except ValueError:
                raise PairingError(f"{path}:{lineno}: bad similarity/hop field") from None
    return PairSet(pairs)
