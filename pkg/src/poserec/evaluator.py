"""Offline item index, ranking metrics, baselines and sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import Dataset
from .errors import DegenerateVectorError, UsageError
from .model import PoseRec

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)
PROTOCOLS = ("ins", "cat")
REPORT_HEADER = ["protocol", "k", "recall", "ndcg", "model"]
PROTO_ID = "__prototype_{}__"
PROTO_CATEGORY = "__prototype__"


# ---------------------------------------------------------------- index


@dataclass
class ItemIndex:
    ids: list
    matrix: np.ndarray  # (N, K*d); row = concat_k omega_k * unit chunk_k
    k: int
    excluded: list = field(default_factory=list)  # (id, reason)

    def scores(self, e_v) -> np.ndarray:
        """(B, K*d) video embeddings -> (B, N) scores in one product."""
        e_v = np.atleast_2d(np.asarray(e_v, dtype=np.float64))
        v = e_v.reshape(len(e_v), self.k, -1)
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        if norms.min() < nx.DEGENERATE_NORM:
            raise DegenerateVectorError("video embedding with a zero-norm chunk")
        return (v / norms).reshape(len(e_v), -1) @ self.matrix.T


def index_from_embeddings(ids, e_i, omega, k: int) -> ItemIndex:
    e_i = np.asarray(e_i, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    c = e_i.reshape(len(e_i), k, -1)
    norms = np.linalg.norm(c, axis=-1, keepdims=True)
    ok = norms.reshape(len(e_i), k).min(axis=1) >= nx.DEGENERATE_NORM
    excluded = [(ids[j], "degenerate chunk") for j in np.flatnonzero(~ok)]
    for iid, why in excluded:
        log.warning("item %s excluded from index: %s", iid, why)
    rows = (omega[:, :, None] * c / np.where(norms > 0, norms, 1.0)).reshape(len(e_i), -1)
    return ItemIndex([ids[j] for j in np.flatnonzero(ok)], rows[ok], k, excluded)


def item_embeddings(model: PoseRec, items, mask=None):
    factors = np.stack([it.factors for it in items])
    emb = model.encode_items(factors, mask)
    return emb.e_i.data, emb.e_ic.data


def build_item_index(model: PoseRec, items, mask=None) -> ItemIndex:
    e_i, e_ic = item_embeddings(model, items, mask)
    omega = model.omega(e_ic).data
    return index_from_embeddings([it.item_id for it in items], e_i, omega, model.shape.k)


def build_category_index(model: PoseRec, items, mask=None) -> ItemIndex:
    """One row per category from the category means of e_i and e_ic, with omega recomputed."""
    e_i, e_ic = item_embeddings(model, items, mask)
    cats = sorted({it.category for it in items})
    member = {c: [] for c in cats}
    for j, it in enumerate(items):
        member[it.category].append(j)
    mean_i = np.stack([e_i[member[c]].mean(axis=0) for c in cats])
    mean_ic = np.stack([e_ic[member[c]].mean(axis=0) for c in cats])
    omega = model.omega(mean_ic).data
    return index_from_embeddings(cats, mean_i, omega, model.shape.k)


# ---------------------------------------------------------------- ranking


def rank(scores, ids, n: int | None = None) -> list:
    """Ids by descending score, ties by ascending id; ``n`` truncates."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = list(ids)
    by_id = np.argsort(np.array(ids, dtype=object), kind="stable")
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[by_id] = np.arange(len(ids))
    order = np.lexsort((id_rank, -scores))
    if n is not None:
        order = order[:n]
    return [ids[j] for j in order]


def recommend(model: PoseRec, windows, index: ItemIndex, n: int):
    """Top-n (item id, score) pairs for one video given its windows."""
    if n < 1:
        raise UsageError("n must be >= 1")
    scores = video_scores(model, windows, index)
    if n > len(index.ids):
        log.info("requested top %d from a catalog of %d; returning the full ranking", n, len(index.ids))
    ranked = rank(scores, index.ids, n)
    pos = {iid: j for j, iid in enumerate(index.ids)}
    return [(iid, float(scores[pos[iid]])) for iid in ranked]


def video_scores(model: PoseRec, windows, index: ItemIndex, batch: int = 64) -> np.ndarray:
    """Mean over the video's windows of the per-window score vectors."""
    windows = np.asarray(windows)
    total = np.zeros(len(index.ids))
    for lo in range(0, len(windows), batch):
        e_v = model.encode_videos(windows[lo : lo + batch]).data
        total += index.scores(e_v).sum(axis=0)
    return total / len(windows)


def recall_at_k(ranking, positives, k: int) -> float:
    positives = set(positives)
    if not positives:
        raise ValueError("recall needs at least one positive")
    return len(set(ranking[:k]) & positives) / len(positives)


def ndcg_at_k(ranking, positives, k: int, gains: dict | None = None) -> float:
    """Binary-relevance NDCG@k; ``gains`` switches to graded gains."""
    positives = set(positives)
    if not positives:
        raise ValueError("ndcg needs at least one positive")
    if gains is None:
        dcg = sum(1.0 / math.log2(j + 2) for j, iid in enumerate(ranking[:k]) if iid in positives)
        idcg = sum(1.0 / math.log2(j + 2) for j in range(min(k, len(positives))))
        return dcg / idcg
    dcg = sum(gains.get(iid, 0.0) / math.log2(j + 2) for j, iid in enumerate(ranking[:k]))
    ideal = sorted((gains[i] for i in positives), reverse=True)[:k]
    idcg = sum(g / math.log2(j + 2) for j, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts with REPORT_HEADER keys
    skipped: int = 0
    n_videos: int = 0

    def row(self, protocol: str, k: int, model: str | None = None) -> dict:
        for r in self.rows:
            if r["protocol"] == protocol and r["k"] == k and (model is None or r["model"] == model):
                return r
        raise KeyError((protocol, k, model))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows += other.rows
        self.skipped += other.skipped
        self.n_videos = max(self.n_videos, other.n_videos)
        return self

    def write_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(extra) + REPORT_HEADER)
            for r in self.rows:
                w.writerow(list(extra.values()) + [r["protocol"], r["k"], repr(r["recall"]), repr(r["ndcg"]), r["model"]])


def _metric_rows(rankings: dict, positives: dict, ks, protocol: str, name: str) -> EvalReport:
    rep = EvalReport()
    vids = [v for v in rankings if positives.get(v)]
    rep.skipped = len(rankings) - len(vids)
    rep.n_videos = len(vids)
    for k in ks:
        rec = [recall_at_k(rankings[v], positives[v], k) for v in vids]
        nd = [ndcg_at_k(rankings[v], positives[v], k) for v in vids]
        rep.rows.append(
            {
                "protocol": protocol,
                "k": k,
                "recall": float(np.mean(rec)) if rec else float("nan"),
                "ndcg": float(np.mean(nd)) if nd else float("nan"),
                "model": name,
            }
        )
    return rep


def split_positives(dataset: Dataset, protocol: str) -> dict:
    """Per video, positive item ids (ins) or categories with any positive item (cat)."""
    cat_of = {it.item_id: it.category for it in dataset.items}
    out = {}
    for v in dataset.videos:
        pos = [i for i in dataset.positives(v.video_id) if i in cat_of]
        out[v.video_id] = set(pos) if protocol == "ins" else {cat_of[i] for i in pos}
    return out


def _check_protocol(protocol: str) -> None:
    if protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def evaluate_model(model: PoseRec, dataset: Dataset, config, protocol: str = "ins", ks=DEFAULT_KS,
                   name: str = "PoseRec") -> EvalReport:
    """Rank the catalog for every video in ``dataset`` and average R@k / N@k over videos."""
    from .trainer import sliding_windows

    _check_protocol(protocol)
    mask = config.mask
    index = (build_item_index if protocol == "ins" else build_category_index)(model, dataset.items, mask)
    positives = split_positives(dataset, protocol)
    rankings = {}
    for v in dataset.videos:
        windows = sliding_windows(v, config.window_len, config.window_step)
        if not windows:
            continue
        rankings[v.video_id] = rank(video_scores(model, np.stack(windows), index), index.ids)
    rep = _metric_rows(rankings, positives, ks, protocol, name)
    rep.skipped += len(dataset.videos) - len(rankings)
    return rep


def catalog_ids(dataset: Dataset, protocol: str) -> list:
    if protocol == "ins":
        return sorted(it.item_id for it in dataset.items)
    return sorted({it.category for it in dataset.items})


def random_baseline(dataset: Dataset, protocol: str = "ins", ks=DEFAULT_KS, seed: int = 0) -> EvalReport:
    _check_protocol(protocol)
    ids = catalog_ids(dataset, protocol)
    rng = np.random.default_rng(seed)
    positives = split_positives(dataset, protocol)
    rankings = {v: [ids[j] for j in rng.permutation(len(ids))] for v in sorted(positives)}
    return _metric_rows(rankings, positives, ks, protocol, "Random")


def popularity(train: Dataset, protocol: str = "ins") -> dict:
    counts: dict = {}
    for vid, per in split_positives(train, protocol).items():
        for i in per:
            counts[i] = counts.get(i, 0) + 1
    return counts


def pop_baseline(train: Dataset, dataset: Dataset, protocol: str = "ins", ks=DEFAULT_KS) -> EvalReport:
    """Rank by training-interaction frequency; the same list for every video."""
    _check_protocol(protocol)
    counts = popularity(train, protocol)
    ids = catalog_ids(dataset, protocol)
    ranking = rank([counts.get(i, 0) for i in ids], ids)
    positives = split_positives(dataset, protocol)
    rep = _metric_rows({v: ranking for v in sorted(positives)}, positives, ks, protocol, "Pop")
    if protocol == "ins":
        for r in rep.rows:
            r["model"] = "Pop(non-comparable)"
    return rep


def full_report(model, train: Dataset, test: Dataset, config, ks=DEFAULT_KS, seed: int = 0) -> EvalReport:
    rep = EvalReport()
    for protocol in PROTOCOLS:
        rep.extend(evaluate_model(model, test, config, protocol, ks))
        rep.extend(random_baseline(test, protocol, ks, seed))
        rep.extend(pop_baseline(train, test, protocol, ks))
    return rep


# ---------------------------------------------------------------- sweeps


SWEEP_AXES = ("K", "factors", "items")


def apply_axis(config, dataset: Dataset, axis: str, value, seed: int):
    """Config and dataset for one sweep point."""
    if axis == "K":
        k = int(value)
        embed = config.K * config.chunk_dim
        if embed % k:
            raise UsageError(f"K={k} does not divide the embedding size {embed}")
        return config.replace(K=k, chunk_dim=embed // k), dataset
    if axis == "factors":
        j = int(value)
        n_f = len(config.factor_mask)
        if not 0 <= j < n_f:
            raise UsageError(f"factor index {j} out of range")
        mask = "".join("0" if i == j else ch for i, ch in enumerate(config.factor_mask))
        return config.replace(factor_mask=mask), dataset
    if axis == "items":
        frac = float(value)
        return config.replace(item_fraction=frac), drop_items(dataset, frac, seed)
    raise UsageError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def drop_items(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep a seeded uniform ``fraction`` of the catalog."""
    if not 0.0 < fraction <= 1.0:
        raise UsageError("item fraction must lie in (0, 1]")
    ids = sorted(dataset.item_by_id)
    n_keep = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng([seed, 7])
    keep = [ids[j] for j in sorted(rng.choice(len(ids), size=n_keep, replace=False))]
    return dataset.with_items(keep)


@dataclass
class SweepPoint:
    value: object
    report: EvalReport
    result: object  # TrainResult
    seconds: float  # training plus evaluation wall time


def sweep(axis: str, values, train_set: Dataset, val_set: Dataset, test_set: Dataset, config, out_dir=None,
          ks=DEFAULT_KS) -> list[SweepPoint]:
    """Retrain per axis value with the shared seed; writes sweep.csv under ``out_dir``."""
    from .trainer import train

    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    points = []
    for value in values:
        start = time.perf_counter()
        cfg, tr = apply_axis(config, train_set, axis, value, config.seed)
        keep = set(tr.item_by_id)
        te = test_set.with_items(keep) if axis == "items" else test_set
        va = val_set.with_items(keep) if axis == "items" else val_set
        run_dir = Path(out_dir) / f"{axis}={value}" if out_dir else None
        res = train(tr, cfg, val=va, out_dir=run_dir)
        rep = EvalReport()
        for protocol in PROTOCOLS:
            rep.extend(evaluate_model(res.model, te, cfg, protocol, ks))
        points.append(SweepPoint(value, rep, res, time.perf_counter() - start))
    if out_dir:
        write_sweep_csv(Path(out_dir) / "sweep.csv", axis, [(p.value, p.report) for p in points])
    return points


def write_sweep_csv(path, axis: str, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis] + REPORT_HEADER)
        for value, rep in results:
            for r in rep.rows:
                w.writerow([value, r["protocol"], r["k"], repr(r["recall"]), repr(r["ndcg"]), r["model"]])


# ---------------------------------------------------------------- embedding export


def export_embeddings(model: PoseRec, items, out, mask=None) -> Path:
    """CSV of item_id, category and e_i, followed by one row per prototype.

    Prototype r_k (dimension d) is written into the columns of chunk k with
    zeros elsewhere, under the reserved id ``__prototype_k__``.
    """
    e_i, _ = item_embeddings(model, items, mask)
    embed = e_i.shape[1]
    d = model.shape.chunk_dim
    out = Path(out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "category"] + [f"e{j}" for j in range(embed)])
        for it, row in zip(items, e_i):
            w.writerow([it.item_id, it.category] + [_f32(x) for x in row])
        for k, r in enumerate(model.bank.rows):
            row = np.zeros(embed)
            row[k * d : (k + 1) * d] = r.data
            w.writerow([PROTO_ID.format(k), PROTO_CATEGORY] + [_f32(x) for x in row])
    return out


def read_embeddings(path) -> tuple[list, list, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        ids, cats, rows = [], [], []
        for r in reader:
            ids.append(r[0])
            cats.append(r[1])
            rows.append([float(x) for x in r[2:]])
    return ids, cats, np.array(rows, dtype=np.float32)


def _f32(x) -> str:
    return repr(float(np.float32(x)))
