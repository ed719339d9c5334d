"""Pose-aware transductive hard-negative mining with similarity counters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CatalogExhaustedError, DegenerateVectorError, MiningError


@dataclass
class MiningBatch:
    video_ids: list
    embeddings: np.ndarray  # (b, E), treated as constants
    positives: list  # per video, a collection of item ids
    threshold: float = 0.5
    n_neg: int = 10

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.positives = [frozenset(p) for p in self.positives]
        if not (len(self.video_ids) == len(self.positives) == len(self.embeddings)):
            raise MiningError("video ids, embeddings and positive sets differ in length")
        if any(not p for p in self.positives):
            raise MiningError("every video in a mining batch needs at least one positive item")
        if not -1.0 < self.threshold < 1.0:
            raise MiningError(f"threshold p must lie in (-1, 1), got {self.threshold}")

    @property
    def b(self) -> int:
        return len(self.video_ids)


@dataclass
class MiningResult:
    negatives: list  # per video, sorted list of sampled item ids
    pair_sims: int = 0
    item_sims: int = 0
    fallback: list = field(default_factory=list)

    def positives_negatives_total(self, batch: MiningBatch) -> int:
        return sum(len(p) for p in batch.positives) + sum(len(n) for n in self.negatives)


@dataclass
class Partition:
    dissimilar: list  # per video, set of batch indices
    pair_sims: int


def partition_by_similarity(batch: MiningBatch) -> Partition:
    """Video u is dissimilar to v iff cos(e_u, e_v) <= p; each unordered pair is scored once."""
    e = batch.embeddings
    norms = np.linalg.norm(e, axis=1)
    if len(norms) and norms.min() < 1e-12:
        raise DegenerateVectorError("zero-norm video embedding in mining batch")
    unit = e / norms[:, None]
    dissimilar = [set() for _ in range(batch.b)]
    count = 0
    for u in range(batch.b):
        for v in range(u + 1, batch.b):
            count += 1
            if float(unit[u] @ unit[v]) <= batch.threshold:
                dissimilar[u].add(v)
                dissimilar[v].add(u)
    return Partition(dissimilar, count)


def sample_hard_negatives(
    batch: MiningBatch,
    partition: Partition,
    rng: np.random.Generator,
    catalog: Sequence[str],
) -> MiningResult:
    """Draw up to n_neg negatives per video from its dissimilar batchmates' positives.

    The video's own positives are always excluded. A video whose pool comes
    out empty samples uniformly from the catalog minus its positives instead.
    """
    catalog = sorted(set(catalog))
    result = MiningResult(negatives=[], pair_sims=partition.pair_sims)
    for v in range(batch.b):
        own = batch.positives[v]
        pool = set()
        for u in partition.dissimilar[v]:
            pool |= batch.positives[u]
        pool = sorted(pool - own)
        used_fallback = not pool
        if used_fallback:
            pool = [i for i in catalog if i not in own]
            if not pool:
                raise CatalogExhaustedError(
                    f"catalog of {len(catalog)} items has nothing outside the {len(own)} positives of video {v}"
                )
        take = min(batch.n_neg, len(pool))
        picks = rng.choice(len(pool), size=take, replace=False)
        negs = sorted(pool[j] for j in picks)
        result.negatives.append(negs)
        result.fallback.append(used_fallback)
        result.item_sims += len(own) + len(negs)
    return result


def mine(batch: MiningBatch, rng: np.random.Generator, catalog: Sequence[str]) -> MiningResult:
    return sample_hard_negatives(batch, partition_by_similarity(batch), rng, catalog)


def traditional_hard_negatives(
    batch: MiningBatch,
    score: Callable[[int, Sequence[str]], np.ndarray],
    threshold: float = 0.0,
) -> MiningResult:
    """Baseline miner: every batch item is a candidate; keep those whose triplet term exceeds ``threshold``.

    ``score(v, item_ids)`` returns the similarities of video v to the items.
    Used only for complexity comparisons.
    """
    all_items = sorted(set().union(*batch.positives))
    result = MiningResult(negatives=[])
    for v in range(batch.b):
        sims = np.asarray(score(v, all_items), dtype=np.float64)
        result.item_sims += len(all_items)
        own = batch.positives[v]
        pos_min = min(s for i, s in zip(all_items, sims) if i in own)
        cands = [(s, i) for i, s in zip(all_items, sims) if i not in own and s - pos_min > threshold]
        cands.sort(key=lambda t: (-t[0], t[1]))
        result.negatives.append(sorted(i for _, i in cands[: batch.n_neg]))
        result.fallback.append(False)
    return result


@dataclass
class ComplexityReport:
    b: int
    c: float
    pair_sims: int
    item_sims: int
    bound: float

    @property
    def measured(self) -> int:
        return self.pair_sims + self.item_sims

    @property
    def within_bound(self) -> bool:
        return self.measured <= self.bound + 1e-9


def complexity_bound(b: int, c: float) -> float:
    return 0.5 * b * b + 2.0 * b * c


def complexity_report(result: MiningResult, b: int, c: float | None = None, strict: bool = True) -> ComplexityReport:
    """Measured similarity computations against the 0.5 b^2 + 2 b c bound.

    ``c`` is the per-video average of the positive and negative counts (each
    video contributes about c of each); by default it is derived from the
    result's own item counter.
    """
    if c is None:
        c = result.item_sims / (2.0 * b) if b else 0.0
    report = ComplexityReport(b, c, result.pair_sims, result.item_sims, complexity_bound(b, c))
    if strict and not report.within_bound:
        raise MiningError(f"measured {report.measured} similarity computations exceed bound {report.bound}")
    return report
