"""Windowing, the training loop and model (de)serialisation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numerics as nx
from .dataio import Dataset, PoseTrajectory
from .errors import DataError, DivergenceError, UsageError
from .mining import MiningBatch, mine
from .model import ModelShape, PoseRec
from .objective import LossFlags, label_loss, total_loss, triplet_loss
from .prototypes import prototype_separation_loss

log = logging.getLogger(__name__)

STEP_LOG_HEADER = ["epoch", "step", "l_label", "l_pro", "l_triple", "l_total", "pair_sims", "item_sims"]
EPOCH_LOG_HEADER = [
    "epoch", "l_label", "l_pro", "l_triple", "l_total", "pair_sims", "item_sims", "val_recall", "val_ndcg",
]


@dataclass
class TrainConfig:
    window_len: int = 10
    window_step: int = 5
    batch_size: int = 16
    epochs: int = 30
    lr: float = 1e-4
    l2: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    p_threshold: float = 0.5
    n_neg: int = 10
    K: int = 4
    chunk_dim: int = 64
    margin: float | None = None
    temperature: float = 1.0
    seed: int = 0
    split_seed: int = 0
    factor_mask: str = "111111111"
    item_fraction: float = 1.0
    use_label: bool = True
    use_pro: bool = True
    use_triple: bool = True
    channels: tuple = (64, 128, 256)
    strides: tuple = (1, 2, 1)
    temporal_kernel: int = 3
    temporal_mixing: str = "depthwise"
    val_k: int = 5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if self.window_len < 1 or self.window_step < 1:
            raise UsageError("window_len and window_step must be >= 1")
        if self.batch_size < 2:
            raise UsageError("batch_size must be >= 2 for in-batch mining")
        if not 0.0 < self.item_fraction <= 1.0:
            raise UsageError("item_fraction must lie in (0, 1]")
        if self.K < 1 or self.chunk_dim < 1:
            raise UsageError("K and chunk_dim must be positive")
        if set(self.factor_mask) - {"0", "1"} or "1" not in self.factor_mask:
            raise UsageError(f"factor_mask must be a 0/1 string with at least one 1, got {self.factor_mask!r}")

    @property
    def mask(self) -> np.ndarray:
        return np.array([ch == "1" for ch in self.factor_mask])

    @property
    def flags(self) -> LossFlags:
        return LossFlags(self.use_label, self.use_pro, self.use_triple)

    def model_shape(self, factor_dim: int, n_factors: int) -> ModelShape:
        return ModelShape(
            factor_dim=factor_dim,
            n_factors=n_factors,
            k=self.K,
            chunk_dim=self.chunk_dim,
            window_len=self.window_len,
            channels=self.channels,
            strides=self.strides,
            temporal_kernel=self.temporal_kernel,
            temporal_mixing=self.temporal_mixing,
            temperature=self.temperature,
        )

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    # -- flat key=value text

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise UsageError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, getattr(cls(), key), raw)
        return cls(**kwargs)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={_format_value(getattr(self, f.name))}" for f in fields(self)]


def _parse_value(key, default, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if key == "margin":
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------- windows


def sliding_windows(frames, length: int = 10, step: int = 5) -> list[np.ndarray]:
    """Windows starting at 0, step, 2*step, ... that fit entirely inside the sequence."""
    if length < 1 or step < 1:
        raise UsageError("window length and step must be >= 1")
    frames = frames.frames if isinstance(frames, PoseTrajectory) else np.asarray(frames)
    return [frames[s : s + length] for s in range(0, len(frames) - length + 1, step)]


def window_starts(n_frames: int, length: int, step: int) -> list[int]:
    return list(range(0, n_frames - length + 1, step))


# ---------------------------------------------------------------- model construction / persistence


def build_model(config: TrainConfig, factor_dim: int, n_factors: int = 9, seed: int | None = None) -> PoseRec:
    rng = np.random.default_rng([config.seed if seed is None else seed, 0])
    return PoseRec(config.model_shape(factor_dim, n_factors), rng)


def model_tensors(model: PoseRec) -> dict:
    return {p.name: p.data for p in model.parameters()}


def save_model(path, model: PoseRec, config: TrainConfig, extra: dict | None = None, dtype="<f8") -> Path:
    meta = {
        "format": "poserec-checkpoint",
        "version": checkpoint.VERSION,
        "config": dict(line.split("=", 1) for line in config.to_lines()),
        "factor_dim": model.shape.factor_dim,
        "n_factors": model.shape.n_factors,
    }
    meta.update(extra or {})
    return checkpoint.save(path, model_tensors(model), meta, dtype)


def load_model(path) -> tuple[PoseRec, TrainConfig, dict]:
    tensors, meta = checkpoint.load(path)
    if "config" not in meta:
        raise DataError(f"{path}: checkpoint sidecar with config is missing")
    config = TrainConfig.from_mapping(meta["config"])
    model = build_model(config, int(meta["factor_dim"]), int(meta["n_factors"]))
    params = model.named_parameters()
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise DataError(f"{path}: checkpoint entries do not match the model ({missing[:5]})")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise DataError(f"{path}: entry {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data[...] = tensors[name]
    return model, config, meta


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: PoseRec
    config: TrainConfig
    step_log: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)
    checkpoint: Path | None = None
    touched_videos: set = field(default_factory=set)


class TrainingSet:
    """Train-split windows with their (whole-video) positive label sets."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.dataset = dataset
        self.samples = []  # (video_id, start)
        for v in dataset.videos:
            if not dataset.positives(v.video_id):
                continue
            for s in window_starts(v.n_frames, config.window_len, config.window_step):
                self.samples.append((v.video_id, s))
        if len(self.samples) < config.batch_size:
            raise DataError(f"only {len(self.samples)} training windows for batch size {config.batch_size}")
        self.window_len = config.window_len
        self.catalog = sorted(dataset.item_by_id)
        self.factors = {it.item_id: it.factors for it in dataset.items}
        self.touched: set = set()

    def batches(self, rng: np.random.Generator, batch_size: int):
        order = rng.permutation(len(self.samples))
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            if len(idx) >= 2:
                yield [self.samples[j] for j in idx]

    def windows(self, batch) -> np.ndarray:
        return np.stack([self.dataset.video_by_id[v].frames[s : s + self.window_len] for v, s in batch])

    def positives(self, video_id: str) -> dict:
        self.touched.add(video_id)
        return self.dataset.positives(video_id)


def training_step(model: PoseRec, tset: TrainingSet, batch, config: TrainConfig, rng: np.random.Generator):
    """Forward one batch on a fresh tape; returns (tape, LossBreakdown, mining result)."""
    flags = config.flags
    video_ids = [v for v, _ in batch]
    positives = [tset.positives(v) for v in video_ids]
    with nx.Tape() as tape:
        e_v = model.encode_videos(tset.windows(batch))
        mined = None
        if flags.triple:
            mb = MiningBatch(video_ids, e_v.data, [p.keys() for p in positives], config.p_threshold, config.n_neg)
            mined = mine(mb, rng, tset.catalog)
        needed = set().union(*(p.keys() for p in positives))
        if mined is not None:
            needed = needed.union(*mined.negatives)
        cols = sorted(needed)
        col_of = {iid: j for j, iid in enumerate(cols)}
        emb = model.encode_items(np.stack([tset.factors[i] for i in cols]), config.mask)
        scores = model.scores(e_v, emb)

        l_label = l_pro = l_triple = None
        if flags.label:
            rows = np.array([b for b, p in enumerate(positives) for _ in p])
            idx = np.array([col_of[i] for p in positives for i in p])
            targets = np.array([s for p in positives for s in p.values()])
            l_label = label_loss(nx.getitem(scores, (rows, idx)), targets)
        if flags.pro:
            l_pro = prototype_separation_loss(model.bank)
        if flags.triple:
            pos_cols = [[col_of[i] for i in p] for p in positives]
            neg_cols = [[col_of[i] for i in n] for n in mined.negatives]
            l_triple = triplet_loss(scores, pos_cols, neg_cols, config.margin)
        breakdown = total_loss(l_label, l_pro, l_triple, flags)
    return tape, breakdown, mined


def train(
    dataset: Dataset,
    config: TrainConfig,
    val: Dataset | None = None,
    out_dir=None,
    model: PoseRec | None = None,
    evaluate_every: int = 1,
    meta: dict | None = None,
) -> TrainResult:
    """Train on ``dataset`` (the training split only) and optionally validate on ``val``.

    Writes ``steps.csv``, ``epochs.csv`` and ``model.psrc`` under ``out_dir``
    when given. A non-finite loss aborts with DivergenceError; the checkpoint
    from the last completed epoch stays on disk. ``meta`` is merged into the
    checkpoint sidecar.
    """
    from .evaluator import evaluate_model  # evaluator imports trainer helpers

    tset = TrainingSet(dataset, config)
    factor_dim = dataset.items[0].factors.shape[1]
    n_factors = dataset.items[0].factors.shape[0]
    model = model or build_model(config, factor_dim, n_factors)
    params = model.parameters()
    result = TrainResult(model, config)
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "model.psrc" if out else None
    step_fh = epoch_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        step_fh = open(out / "steps.csv", "w", newline="")
        epoch_fh = open(out / "epochs.csv", "w", newline="")
        step_w = csv.writer(step_fh, lineterminator="\n")
        epoch_w = csv.writer(epoch_fh, lineterminator="\n")
        step_w.writerow(STEP_LOG_HEADER)
        epoch_w.writerow(EPOCH_LOG_HEADER)

    def validate():
        if val is None:
            return float("nan"), float("nan")
        rep = evaluate_model(model, val, config, protocol="ins", ks=(config.val_k,))
        row = rep.row("ins", config.val_k)
        return row["recall"], row["ndcg"]

    def epoch_row(epoch, rows, metrics):
        keys = ["l_label", "l_pro", "l_triple", "l_total"]
        means = [float(np.mean([r[k] for r in rows])) if rows else float("nan") for k in keys]
        sims = [int(sum(r[k] for r in rows)) for k in ("pair_sims", "item_sims")]
        rec = dict(zip(EPOCH_LOG_HEADER, [epoch, *means, *sims, *metrics]))
        result.epoch_log.append(rec)
        if epoch_fh:
            epoch_w.writerow([_fmt(rec[k]) for k in EPOCH_LOG_HEADER])
            epoch_fh.flush()
        log.info("epoch %d total=%.4f val R@%d=%.4f", epoch, rec["l_total"], config.val_k, rec["val_recall"])

    try:
        epoch_row(0, [], validate())
        step = 0
        for epoch in range(1, config.epochs + 1):
            rows = []
            shuffle_rng = np.random.default_rng([config.seed, 1, epoch])
            mine_rng = np.random.default_rng([config.seed, 2, epoch])
            for batch in tset.batches(shuffle_rng, config.batch_size):
                step += 1
                tape, br, mined = training_step(model, tset, batch, config, mine_rng)
                if not math.isfinite(br.l_total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
                tape.backward(br.total)
                nx.adam_step(params, config.lr, (config.beta1, config.beta2), config.eps, config.l2)
                row = {
                    "epoch": epoch,
                    "step": step,
                    "l_label": br.l_label,
                    "l_pro": br.l_pro,
                    "l_triple": br.l_triple,
                    "l_total": br.l_total,
                    "pair_sims": mined.pair_sims if mined else 0,
                    "item_sims": mined.item_sims if mined else 0,
                }
                rows.append(row)
                result.step_log.append(row)
                if step_fh:
                    step_w.writerow([_fmt(row[k]) for k in STEP_LOG_HEADER])
            if any(not np.all(np.isfinite(p.data)) for p in params):
                raise DivergenceError(f"non-finite parameters after epoch {epoch}")
            metrics = validate() if (epoch % evaluate_every == 0 or epoch == config.epochs) else (float("nan"),) * 2
            epoch_row(epoch, rows, metrics)
            if ckpt_path:
                extra = {**(meta or {}), "epochs_completed": epoch, "rng": _rng_state(config, epoch)}
                save_model(ckpt_path, model, config, extra)
        result.checkpoint = ckpt_path
    finally:
        result.touched_videos = set(tset.touched)
        for fh in (step_fh, epoch_fh):
            if fh:
                fh.close()
    return result


def _rng_state(config: TrainConfig, epoch: int) -> dict:
    return {
        "seed": config.seed,
        "next_epoch": epoch + 1,
        "shuffle": np.random.default_rng([config.seed, 1, epoch + 1]).bit_generator.state,
        "mining": np.random.default_rng([config.seed, 2, epoch + 1]).bit_generator.state,
    }


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------- gradient check


def micro_gradcheck(
    config: TrainConfig, seed: int | None = None, max_entries: int = 12, factor_dim: int = 768
) -> nx.GradcheckReport:
    """Finite-difference check of the full loss on a 2-video x 8-item batch.

    Mining runs once up front so the selected negatives stay fixed while
    parameters are perturbed; every enabled loss term is included.
    """
    from .dataio import SynthSpec, synthesize

    seed = config.seed if seed is None else seed
    data = synthesize(
        SynthSpec(n_classes=2, videos_per_class=1, items_per_class=3, names_per_class=2, shared_items=2,
                  factor_dim=factor_dim, frames=config.window_len, seed=seed)
    )
    ds = data.dataset()
    cfg = config.replace(seed=seed, batch_size=2)
    model = build_model(cfg, factor_dim, data.items[0].factors.shape[0])
    tset = TrainingSet(ds, cfg)
    batch = tset.samples[:2]
    video_ids = [v for v, _ in batch]
    positives = [tset.positives(v) for v in video_ids]
    windows = tset.windows(batch)
    cols = tset.catalog
    col_of = {iid: j for j, iid in enumerate(cols)}
    factors = np.stack([tset.factors[i] for i in cols])
    negatives = None
    if cfg.flags.triple:
        e_v = model.encode_videos(windows).data
        mb = MiningBatch(video_ids, e_v, [p.keys() for p in positives], cfg.p_threshold, min(cfg.n_neg, 4))
        negatives = mine(mb, np.random.default_rng([seed, 3]), cols).negatives
    rows = np.array([b for b, p in enumerate(positives) for _ in p])
    idx = np.array([col_of[i] for p in positives for i in p])
    targets = np.array([s for p in positives for s in p.values()])
    pos_cols = [[col_of[i] for i in p] for p in positives]

    def forward():
        scores = model.scores(model.encode_videos(windows), model.encode_items(factors, cfg.mask))
        l_label = label_loss(nx.getitem(scores, (rows, idx)), targets) if cfg.flags.label else None
        l_pro = prototype_separation_loss(model.bank) if cfg.flags.pro else None
        l_triple = None
        if cfg.flags.triple:
            neg_cols = [[col_of[i] for i in n] for n in negatives]
            l_triple = triplet_loss(scores, pos_cols, neg_cols, cfg.margin)
        return total_loss(l_label, l_pro, l_triple, cfg.flags).total

    return nx.gradcheck(forward, model.parameters(), tolerance=1e-4, max_entries=max_entries,
                        rng=np.random.default_rng([seed, 4]))
