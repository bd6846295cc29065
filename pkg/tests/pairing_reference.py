"""Deliberately naive transcription of the recursive neighbor-matching
procedure, kept independent of the optimized implementation so equivalence
tests have teeth. No caching, no precomputed indexes: every similarity is
recomputed from the raw vectors on demand.
"""

from __future__ import annotations

import numpy as np

from slrkit.corpus import Corpus, neighboring_days
from slrkit.errors import PcaError
from slrkit.features import FeatureVector, fit_pca, project
from slrkit.pairing import Pair, PairingConfig, PairSet


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    return float(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))


def _reduced_vectors(corpus: Corpus, featstore: dict[str, FeatureVector],
                     config: PairingConfig) -> dict[str, np.ndarray]:
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


def reference_build_pairs(corpus: Corpus, featstore: dict[str, FeatureVector],
                          config: PairingConfig | None = None) -> PairSet:
    config = config or PairingConfig()
    eligible = [r for r in corpus.records if r.split in ("train", "unlabeled")]
    vectors = _reduced_vectors(corpus, featstore, config)

    matches: dict[str, list[tuple[str, float, int]]] = {}
    visited: dict[str, set[str]] = {}

    def avg_sim(seed_id: str) -> float:
        accepted = matches[seed_id]
        if not accepted:
            return config.tau_min
        return sum(s for _, s, _ in accepted) / len(accepted)

    def compare(seed_id: str, ref_id: str, hop: int) -> None:
        ref = corpus.record(ref_id)
        for day in neighboring_days(corpus, ref.subject_id, ref.day):
            candidates = sorted(
                (r for r in eligible
                 if r.subject_id == ref.subject_id and r.day == day
                 and r.id not in visited[seed_id]),
                key=lambda r: (r.index, r.id),
            )
            max_sim = None
            match = None
            for cand in candidates:
                s = _cosine(vectors[ref_id], vectors[cand.id])
                if max_sim is None or s > max_sim:
                    max_sim = s
                    match = cand
            if match is None:
                continue
            if max_sim >= avg_sim(seed_id) and max_sim >= config.tau_min:
                matches[seed_id].append((match.id, max_sim, hop))
                visited[seed_id].add(match.id)
                compare(seed_id, match.id, hop + 1)

    seeds = sorted((r for r in eligible if r.split == "train"), key=lambda r: r.sort_key())
    for seed in seeds:
        matches[seed.id] = []
        visited[seed.id] = {seed.id}
        compare(seed.id, seed.id, 1)

    claims: dict[str, tuple[float, str, int]] = {}
    for seed in seeds:
        for match_id, sim, hop in matches[seed.id]:
            if corpus.record(match_id).split != "unlabeled":
                continue
            prev = claims.get(match_id)
            if prev is None or sim > prev[0] or (sim == prev[0] and seed.id < prev[1]):
                claims[match_id] = (sim, seed.id, hop)

    pairs = [Pair(labeled_id=seed_id, pseudo_id=pseudo_id, similarity=sim, hop_count=hop)
             for pseudo_id, (sim, seed_id, hop) in claims.items()]
    pairs.sort(key=lambda p: (p.labeled_id, p.pseudo_id))
    return PairSet(pairs)
