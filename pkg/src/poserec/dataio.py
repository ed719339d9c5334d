"""Pose, item and label files, dataset splits, and the planted synthetic benchmark.

Formats
-------
poses   JSON Lines, one object per video::

            {"video_id": "...", "frames": [[[x, y, z, vis] * 33] * T], "class": 3}

        ``class`` is optional and only used for stratified splitting.
        Frames with three channels (x, y, vis) are accepted and get z = 0.
items   little-endian binary: b"POBI", u32 version, u32 count, u16 F, u16 dim,
        then per item u16 length + UTF-8 id, u16 length + UTF-8 category,
        F*dim float32 factor values (row-major).
labels  CSV with header ``video_id,item_id,score``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, LabelError, SpecError, SplitError
from .item_encoder import N_FACTORS, ItemRecord
from .pose_encoder import N_LANDMARKS

ITEM_MAGIC = b"POBI"
ITEM_VERSION = 1
BERT_DIM = 768


@dataclass
class PoseTrajectory:
    video_id: str
    frames: np.ndarray  # (T, 33, 4)
    label: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------- poses


def _parse_frames(frames, where: str, allow_reduced: bool) -> np.ndarray:
    if not isinstance(frames, list) or not frames:
        raise FormatError(f"{where}: 'frames' must be a non-empty list")
    width = None
    for t, frame in enumerate(frames):
        if not isinstance(frame, list) or len(frame) != N_LANDMARKS:
            got = len(frame) if isinstance(frame, list) else type(frame).__name__
            raise FormatError(f"{where}, frame {t}: expected {N_LANDMARKS} landmarks, got {got}")
        for j, lm in enumerate(frame):
            n = len(lm) if isinstance(lm, list) else -1
            if width is None:
                width = n
            if n != width or n not in ((3, 4) if allow_reduced else (4,)):
                raise FormatError(f"{where}, frame {t}, landmark {j}: expected 4 channels, got {n}")
    try:
        arr = np.array(frames, dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"{where}: non-numeric landmark value") from None
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite landmark value")
    if width == 3:
        arr = np.concatenate([arr[..., :2], np.zeros(arr.shape[:2] + (1,)), arr[..., 2:]], axis=-1)
    vis = arr[..., 3]
    if np.any((vis < 0.0) | (vis > 1.0)):
        raise DataError(f"{where}: visibility outside [0, 1]")
    return arr


def load_poses(path, allow_reduced: bool = True) -> list[PoseTrajectory]:
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("video_id"), str):
                raise FormatError(f"{where}: object with string 'video_id' expected")
            vid = obj["video_id"]
            if vid in seen:
                raise FormatError(f"{where}: duplicate video_id {vid!r}")
            seen.add(vid)
            label = obj.get("class")
            if label is not None and not isinstance(label, int):
                raise FormatError(f"{where}: 'class' must be an integer")
            out.append(PoseTrajectory(vid, _parse_frames(obj.get("frames"), where, allow_reduced), label))
    return out


def dump_pose_line(traj: PoseTrajectory) -> str:
    obj = {"video_id": traj.video_id, "frames": np.asarray(traj.frames).tolist()}
    if traj.label is not None:
        obj["class"] = int(traj.label)
    return json.dumps(obj, separators=(",", ":"))


def write_poses(path, trajectories) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajectories:
            fh.write(dump_pose_line(traj) + "\n")


# ---------------------------------------------------------------- items


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long for item file: {s[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def encode_items(items) -> bytes:
    items = list(items)
    n_f, dim = (items[0].factors.shape if items else (N_FACTORS, BERT_DIM))
    buf = io.BytesIO()
    buf.write(ITEM_MAGIC + struct.pack("<IIHH", ITEM_VERSION, len(items), n_f, dim))
    for it in items:
        if it.factors.shape != (n_f, dim):
            raise FormatError(f"item {it.item_id}: factors {it.factors.shape} differ from ({n_f}, {dim})")
        buf.write(_pack_str(it.item_id))
        buf.write(_pack_str(it.category))
        buf.write(np.ascontiguousarray(it.factors, dtype="<f4").tobytes())
    return buf.getvalue()


def write_items(path, items) -> None:
    Path(path).write_bytes(encode_items(items))


def decode_items(blob: bytes, where: str = "<items>") -> list[ItemRecord]:
    header = 4 + struct.calcsize("<IIHH")
    if len(blob) < header or blob[:4] != ITEM_MAGIC:
        raise FormatError(f"{where}: missing POBI header")
    version, count, n_f, dim = struct.unpack_from("<IIHH", blob, 4)
    if version != ITEM_VERSION:
        raise FormatError(f"{where}: unsupported item format version {version}")
    if n_f == 0 or dim == 0:
        raise FormatError(f"{where}: header declares F={n_f}, dim={dim}")
    pos = header
    payload = n_f * dim * 4

    def read_str():
        nonlocal pos
        if pos + 2 > len(blob):
            raise FormatError(f"{where}: truncated payload")
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + n > len(blob):
            raise FormatError(f"{where}: truncated payload")
        try:
            s = blob[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{where}: invalid UTF-8 at byte {pos}") from None
        pos += n
        return s

    items, seen = [], set()
    for _ in range(count):
        item_id = read_str()
        category = read_str()
        if pos + payload > len(blob):
            raise FormatError(f"{where}: truncated payload for item {item_id!r}")
        factors = np.frombuffer(blob, dtype="<f4", count=n_f * dim, offset=pos).reshape(n_f, dim)
        pos += payload
        if item_id in seen:
            raise FormatError(f"{where}: duplicate item id {item_id!r}")
        if not np.all(np.isfinite(factors)):
            raise DataError(f"{where}: non-finite factor value in item {item_id!r}")
        seen.add(item_id)
        items.append(ItemRecord(item_id, category, factors.astype(np.float64)))
    if pos != len(blob):
        raise FormatError(f"{where}: {len(blob) - pos} trailing bytes after {count} items")
    return items


def load_items(path) -> list[ItemRecord]:
    return decode_items(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- labels


LABEL_HEADER = ["video_id", "item_id", "score"]


def load_labels(path) -> dict[str, dict[str, float]]:
    labels: dict[str, dict[str, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise FormatError(f"{path}: header must be {','.join(LABEL_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            vid, iid, raw = row
            try:
                score = float(raw)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: score {raw!r} is not a number") from None
            if not (0.0 <= score <= 1.0):
                raise LabelError(f"{path}:{lineno}: score {score} outside [0, 1]")
            per = labels.setdefault(vid, {})
            if iid in per:
                raise LabelError(f"{path}:{lineno}: duplicate pair ({vid}, {iid})")
            per[iid] = score
    return labels


def write_labels(path, labels: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for vid, per in labels.items():
            for iid, score in per.items():
                w.writerow([vid, iid, repr(float(score))])


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    videos: list
    items: list
    labels: dict  # video_id -> {item_id: score}

    def __post_init__(self):
        self.video_by_id = {v.video_id: v for v in self.videos}
        self.item_by_id = {it.item_id: it for it in self.items}

    @classmethod
    def load(cls, poses, items, labels) -> "Dataset":
        ds = cls(load_poses(poses), load_items(items), load_labels(labels))
        ds.check_references()
        return ds

    def check_references(self) -> None:
        for vid, per in self.labels.items():
            if vid not in self.video_by_id:
                raise DataError(f"label references unknown video {vid!r}")
            for iid in per:
                if iid not in self.item_by_id:
                    raise DataError(f"label references unknown item {iid!r}")

    def positives(self, video_id: str) -> dict:
        return {i: s for i, s in self.labels.get(video_id, {}).items() if s > 0.0}

    def subset(self, video_ids) -> "Dataset":
        keep = set(video_ids)
        return Dataset(
            [v for v in self.videos if v.video_id in keep],
            self.items,
            {vid: dict(per) for vid, per in self.labels.items() if vid in keep},
        )

    def with_items(self, item_ids) -> "Dataset":
        """Restrict the catalog; labels to dropped items disappear, as do videos left without positives."""
        keep = set(item_ids)
        items = [it for it in self.items if it.item_id in keep]
        labels = {}
        for vid, per in self.labels.items():
            kept = {i: s for i, s in per.items() if i in keep}
            if any(s > 0 for s in kept.values()):
                labels[vid] = kept
        return Dataset([v for v in self.videos if v.video_id in labels], items, labels)


def split_dataset(videos, ratios=(0.6, 0.2, 0.2), seed: int = 0, classes=None):
    """Seeded split of video ids into (train, val, test), stratified when classes are given.

    ``videos`` may be PoseTrajectory objects (their ``label`` is used for
    stratification when every video has one) or plain ids.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [v.video_id if isinstance(v, PoseTrajectory) else v for v in videos]
    if classes is None and videos and all(isinstance(v, PoseTrajectory) and v.label is not None for v in videos):
        classes = [v.label for v in videos]
    groups: dict = {}
    for i, vid in enumerate(ids):
        groups.setdefault(classes[i] if classes is not None else None, []).append(vid)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for key in sorted(groups, key=lambda k: (k is None, str(k))):
        members = sorted(groups[key])
        order = [members[j] for j in rng.permutation(len(members))]
        n = len(order)
        n_train = int(round(n * ratios[0]))
        n_val = int(round(n * ratios[1]))
        n_val = min(n_val, n - n_train)
        train += order[:n_train]
        val += order[n_train : n_train + n_val]
        test += order[n_train + n_val :]
    if not train or not val or not test:
        raise SplitError(f"split of {len(ids)} videos leaves an empty partition ({len(train)}, {len(val)}, {len(test)})")
    return sorted(train), sorted(val), sorted(test)


# ---------------------------------------------------------------- synthetic benchmark

# Rough standing skeleton in metres (x right, y up, z towards camera).
_BASE_SKELETON = np.array(
    [
        [0.00, 1.60, 0.08],  # nose
        [0.02, 1.64, 0.07], [0.035, 1.64, 0.065], [0.05, 1.64, 0.06],  # left eye inner/centre/outer
        [-0.02, 1.64, 0.07], [-0.035, 1.64, 0.065], [-0.05, 1.64, 0.06],  # right eye
        [0.08, 1.62, 0.0], [-0.08, 1.62, 0.0],  # ears
        [0.025, 1.55, 0.07], [-0.025, 1.55, 0.07],  # mouth
        [0.20, 1.40, 0.0], [-0.20, 1.40, 0.0],  # shoulders
        [0.25, 1.12, 0.0], [-0.25, 1.12, 0.0],  # elbows
        [0.27, 0.86, 0.02], [-0.27, 0.86, 0.02],  # wrists
        [0.29, 0.79, 0.02], [-0.29, 0.79, 0.02],  # pinky
        [0.27, 0.78, 0.04], [-0.27, 0.78, 0.04],  # index
        [0.25, 0.81, 0.05], [-0.25, 0.81, 0.05],  # thumb
        [0.10, 0.95, 0.0], [-0.10, 0.95, 0.0],  # hips
        [0.11, 0.52, 0.02], [-0.11, 0.52, 0.02],  # knees
        [0.11, 0.09, 0.0], [-0.11, 0.09, 0.0],  # ankles
        [0.11, 0.03, -0.05], [-0.11, 0.03, -0.05],  # heels
        [0.11, 0.0, 0.12], [-0.11, 0.0, 0.12],  # foot index
    ]
)
_TORSO = (11, 12, 23, 24)


@dataclass
class SynthSpec:
    n_classes: int = 8
    videos_per_class: int = 67
    items_per_class: int = 20
    names_per_class: int = 5
    shared_items: int = 10
    classes_per_shared: int = 2
    frames: int = 20
    pose_noise: float = 0.03
    offset_sigma: float = 1.0
    motion_amplitude: float = 0.12
    posture_amplitude: float = 0.12
    embed_noise: float = 0.5
    factor_dim: int = BERT_DIM
    n_factors: int = N_FACTORS
    min_labels: int = 3
    max_labels: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.videos_per_class < 1 or self.items_per_class < 1:
            raise SpecError("need at least one class, one video and one item per class")
        if self.shared_items and (self.classes_per_shared < 2 or self.classes_per_shared > self.n_classes):
            raise SpecError("shared items must attach to at least 2 and at most n_classes classes")
        if not (1 <= self.min_labels <= self.max_labels):
            raise SpecError("need 1 <= min_labels <= max_labels")
        if not (1 <= self.names_per_class <= self.items_per_class):
            raise SpecError("names_per_class must lie in [1, items_per_class]")
        if self.frames < 1 or self.factor_dim < 1 or self.n_factors < 1:
            raise SpecError("frames, factor_dim and n_factors must be positive")
        if min(self.pose_noise, self.offset_sigma, self.embed_noise) < 0:
            raise SpecError("noise scales must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthSpec":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise SpecError(f"unknown synthetic spec key {key!r}")
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw) if not isinstance(raw, type(default)) else raw
        spec = cls(**kwargs)
        spec.validate()
        return spec


@dataclass
class SynthData:
    videos: list
    items: list
    labels: dict
    item_class: dict = field(default_factory=dict)  # item id -> tuple of classes

    def dataset(self) -> Dataset:
        return Dataset(self.videos, self.items, self.labels)


def _class_motion(rng, spec: SynthSpec, c: int):
    movable = np.ones(N_LANDMARKS, dtype=bool)
    movable[list(_TORSO)] = False
    posture = rng.normal(0.0, spec.posture_amplitude, size=(N_LANDMARKS, 3)) * movable[:, None]
    amp = rng.normal(0.0, spec.motion_amplitude, size=(N_LANDMARKS, 3)) * movable[:, None]
    freq = 0.04 + 0.25 * (c + rng.uniform(0.0, 0.5)) / max(spec.n_classes, 1)
    phase = rng.uniform(0.0, 2 * math.pi, size=(N_LANDMARKS, 1))
    return posture, amp, freq, phase


def synthesize(spec: SynthSpec) -> SynthData:
    """Build the planted benchmark in memory; everything is a function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_c = spec.n_classes

    # poses: class posture + class sinusoid + per-video offset + frame noise
    videos = []
    t = np.arange(spec.frames)[:, None, None]
    for c in range(n_c):
        posture, amp, freq, phase = _class_motion(rng, spec, c)
        clean = _BASE_SKELETON[None] + posture[None] + amp[None] * np.sin(2 * math.pi * freq * t + phase[None])
        for j in range(spec.videos_per_class):
            offset = rng.normal(0.0, spec.offset_sigma, size=3)
            xyz = clean + offset + rng.normal(0.0, spec.pose_noise, size=clean.shape)
            vis = np.clip(0.9 + rng.normal(0.0, spec.pose_noise, size=clean.shape[:2] + (1,)), 0.0, 1.0)
            videos.append(PoseTrajectory(f"vid-c{c:02d}-{j:04d}", np.concatenate([xyz, vis], axis=-1), c))

    # items: factor base + informativeness-weighted class and name directions + noise
    dim, n_f = spec.factor_dim, spec.n_factors
    base = rng.normal(0.0, 1.0, size=(n_f, dim))
    informativeness = rng.uniform(0.3, 1.0, size=n_f)
    class_vec = rng.normal(0.0, 1.0, size=(n_c, dim))
    items, item_class, relevance = [], {}, {}
    for c in range(n_c):
        name_vec = rng.normal(0.0, 1.0, size=(spec.names_per_class, dim))
        for j in range(spec.items_per_class):
            g = j % spec.names_per_class
            signal = class_vec[c] + name_vec[g]
            factors = base + informativeness[:, None] * signal[None] + rng.normal(0.0, spec.embed_noise, (n_f, dim))
            iid = f"item-c{c:02d}-{j:03d}"
            items.append(ItemRecord(iid, f"class{c:02d}-name{g}", factors.astype(np.float32).astype(np.float64)))
            item_class[iid] = (c,)
            relevance[iid] = 1.0 / (1.0 + 0.25 * j)
    shared_of_class: dict = {c: [] for c in range(n_c)}
    for s in range(spec.shared_items):
        owners = tuple(sorted(int(c) for c in rng.choice(n_c, size=spec.classes_per_shared, replace=False)))
        signal = class_vec[list(owners)].mean(axis=0) + rng.normal(0.0, 1.0, size=dim)
        factors = base + informativeness[:, None] * signal[None] + rng.normal(0.0, spec.embed_noise, (n_f, dim))
        iid = f"item-shared-{s:03d}"
        items.append(ItemRecord(iid, f"shared-name{s}", factors.astype(np.float32).astype(np.float64)))
        item_class[iid] = owners
        for c in owners:
            shared_of_class[c].append(iid)

    # labels: every shared item of the class, then relevance-weighted class items
    labels = {}
    for v in videos:
        c = v.label
        class_items = [f"item-c{c:02d}-{j:03d}" for j in range(spec.items_per_class)]
        shared = shared_of_class[c][: spec.max_labels - 1]
        total = int(rng.integers(spec.min_labels, spec.max_labels + 1))
        n_cls = min(max(total - len(shared), 1), len(class_items), spec.max_labels - len(shared))
        p = np.array([relevance[i] for i in class_items])
        picks = rng.choice(len(class_items), size=n_cls, replace=False, p=p / p.sum())
        per = {}
        for iid in sorted(shared):
            per[iid] = round(float(np.clip(0.45 + rng.normal(0.0, 0.05), 0.05, 1.0)), 4)
        for j in sorted(picks):
            iid = class_items[j]
            per[iid] = round(float(np.clip(0.3 + 0.7 * relevance[iid] + rng.normal(0.0, 0.05), 0.05, 1.0)), 4)
        labels[v.video_id] = per
    return SynthData(videos, items, labels, item_class)


def generate_synthetic(spec: SynthSpec, out_dir) -> tuple[Path, Path, Path]:
    """Write poses.jsonl, items.bin and labels.csv for ``spec`` into ``out_dir``."""
    data = synthesize(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "poses.jsonl", out / "items.bin", out / "labels.csv"
    write_poses(paths[0], data.videos)
    write_items(paths[1], data.items)
    write_labels(paths[2], data.labels)
    return paths
