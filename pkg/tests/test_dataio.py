import json
import struct

import numpy as np
import pytest

from poserec.dataio import (
    Dataset,
    PoseTrajectory,
    SynthSpec,
    decode_items,
    encode_items,
    generate_synthetic,
    load_items,
    load_labels,
    load_poses,
    split_dataset,
    synthesize,
    write_items,
    write_labels,
    write_poses,
)
from poserec.errors import DataError, FormatError, LabelError, SpecError, SplitError
from poserec.item_encoder import ItemRecord
from poserec.pose_encoder import normalize_pose

SMALL = dict(n_classes=3, videos_per_class=6, items_per_class=6, names_per_class=2, shared_items=2,
             factor_dim=8, frames=12)


@pytest.fixture(scope="module")
def small():
    return synthesize(SynthSpec(**SMALL))


# ---------------------------------------------------------------- poses


def test_zero_video_loads(tmp_path):
    p = tmp_path / "poses.jsonl"
    p.write_text(json.dumps({"video_id": "v", "frames": np.zeros((10, 33, 4)).tolist()}) + "\n")
    (traj,) = load_poses(p)
    assert traj.video_id == "v" and traj.frames.shape == (10, 33, 4) and traj.label is None


def test_missing_landmark_names_line_and_frame(tmp_path):
    frames = np.zeros((3, 33, 4)).tolist()
    frames[2] = frames[2][:32]
    p = tmp_path / "poses.jsonl"
    p.write_text(json.dumps({"video_id": "ok", "frames": np.zeros((2, 33, 4)).tolist()}) + "\n"
                 + json.dumps({"video_id": "bad", "frames": frames}) + "\n")
    with pytest.raises(FormatError, match=r"poses.jsonl:2, frame 2"):
        load_poses(p)


@pytest.mark.parametrize("value", ["NaN", "Infinity"])
def test_non_finite_pose_is_data_error(tmp_path, value):
    frames = np.zeros((1, 33, 4)).tolist()
    text = json.dumps({"video_id": "v", "frames": frames}).replace("0.0", value, 1)
    p = tmp_path / "poses.jsonl"
    p.write_text(text + "\n")
    with pytest.raises(DataError) as err:
        load_poses(p)
    assert not isinstance(err.value, FormatError)


@pytest.mark.parametrize(
    "line",
    ["{not json", json.dumps({"frames": []}), json.dumps({"video_id": "v", "frames": []})],
)
def test_malformed_pose_lines(tmp_path, line):
    p = tmp_path / "poses.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(FormatError):
        load_poses(p)


def test_visibility_out_of_range(tmp_path):
    frames = np.zeros((1, 33, 4))
    frames[0, 5, 3] = 1.5
    p = tmp_path / "poses.jsonl"
    p.write_text(json.dumps({"video_id": "v", "frames": frames.tolist()}) + "\n")
    with pytest.raises(DataError):
        load_poses(p)


def test_duplicate_video_ids(tmp_path):
    line = json.dumps({"video_id": "v", "frames": np.zeros((1, 33, 4)).tolist()})
    p = tmp_path / "poses.jsonl"
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(FormatError):
        load_poses(p)


def test_reduced_channels_zero_fill_depth(tmp_path):
    frames = np.random.default_rng(0).uniform(size=(2, 33, 3))
    p = tmp_path / "poses.jsonl"
    p.write_text(json.dumps({"video_id": "v", "frames": frames.tolist()}) + "\n")
    (traj,) = load_poses(p)
    assert np.array_equal(traj.frames[..., [0, 1, 3]], frames) and not traj.frames[..., 2].any()
    with pytest.raises(FormatError):
        load_poses(p, allow_reduced=False)


def test_pose_round_trip(tmp_path, small):
    p = tmp_path / "poses.jsonl"
    write_poses(p, small.videos)
    back = load_poses(p)
    assert [v.video_id for v in back] == [v.video_id for v in small.videos]
    for a, b in zip(back, small.videos):
        assert np.array_equal(a.frames, b.frames) and a.label == b.label


# ---------------------------------------------------------------- items


def test_small_dim_items_accepted(tmp_path):
    items = [ItemRecord(f"i{j}", "cat", np.arange(72, dtype=float).reshape(9, 8) * j) for j in range(2)]
    p = tmp_path / "items.bin"
    write_items(p, items)
    back = load_items(p)
    assert [it.factors.shape for it in back] == [(9, 8), (9, 8)]
    assert np.array_equal(back[1].factors, items[1].factors)


def test_item_header_layout():
    blob = encode_items([ItemRecord("ab", "c", np.zeros((9, 4)))])
    assert blob[:4] == b"POBI"
    assert struct.unpack_from("<IIHH", blob, 4) == (1, 1, 9, 4)
    assert len(blob) == 16 + 2 + 2 + 2 + 1 + 9 * 4 * 4


def test_truncated_items_raise(small):
    blob = encode_items(small.items)
    for cut in (3, 10, len(blob) - 1):
        with pytest.raises(FormatError):
            decode_items(blob[:cut])
    with pytest.raises(FormatError):
        decode_items(blob + b"\0")


def test_item_round_trip_is_byte_identical(tmp_path, small):
    p = tmp_path / "items.bin"
    write_items(p, small.items)
    assert encode_items(load_items(p)) == p.read_bytes()


def test_items_with_nan_rejected():
    f = np.zeros((9, 2))
    f[3, 1] = np.nan
    with pytest.raises(DataError):
        decode_items(encode_items([ItemRecord("x", "c", f)]))


# ---------------------------------------------------------------- labels


def test_label_round_trip(tmp_path, small):
    p = tmp_path / "labels.csv"
    write_labels(p, small.labels)
    assert p.read_text().splitlines()[0] == "video_id,item_id,score"
    assert load_labels(p) == small.labels


@pytest.mark.parametrize(
    "body,error",
    [
        ("v,i,1.5\n", LabelError),
        ("v,i,abc\n", FormatError),
        ("v,i\n", FormatError),
        ("v,i,0.5\nv,i,0.4\n", LabelError),
    ],
)
def test_bad_label_rows(tmp_path, body, error):
    p = tmp_path / "labels.csv"
    p.write_text("video_id,item_id,score\n" + body)
    with pytest.raises(error):
        load_labels(p)


def test_unresolved_reference(small):
    ds = small.dataset()
    ds.labels["ghost"] = {"x": 0.5}
    with pytest.raises(DataError):
        ds.check_references()


# ---------------------------------------------------------------- splits


def test_ten_videos_split_six_two_two():
    ids = [f"v{j}" for j in range(10)]
    tr, va, te = split_dataset(ids, seed=3)
    assert (len(tr), len(va), len(te)) == (6, 2, 2)
    assert sorted(tr + va + te) == ids
    assert split_dataset(ids, seed=3) == (tr, va, te)


def test_tiny_split_raises():
    with pytest.raises(SplitError):
        split_dataset(["a", "b"])
    with pytest.raises(SplitError):
        split_dataset(["a"] * 5, ratios=(0.5, 0.5, 0.5))


def test_stratified_every_class_in_train_over_100_seeds():
    videos = [PoseTrajectory(f"v{c}-{j}", np.zeros((1, 33, 4)), c) for c in range(6) for j in range(5)]
    for seed in range(100):
        tr, va, te = split_dataset(videos, seed=seed)
        assert {v.split("-")[0] for v in tr} == {f"v{c}" for c in range(6)}
        assert not set(tr) & set(va) and not set(va) & set(te)


def test_default_synthetic_split_sizes():
    spec = SynthSpec()
    ids = [f"v{c}-{j}" for c in range(spec.n_classes) for j in range(spec.videos_per_class)]
    tr, va, te = split_dataset(ids, classes=[i.split("-")[0] for i in ids])
    assert (len(tr), len(va), len(te)) == (8 * 40, 8 * 13, 8 * 14)


# ---------------------------------------------------------------- synthetic data


def test_noise_free_classes_repeat_one_trajectory():
    data = synthesize(SynthSpec(**{**SMALL, "n_classes": 2, "pose_noise": 0.0, "offset_sigma": 0.0}))
    for c in range(2):
        frames = [v.frames for v in data.videos if v.label == c]
        assert all(np.array_equal(frames[0], f) for f in frames[1:])
    assert not np.array_equal(data.videos[0].frames, data.videos[-1].frames)


def test_offsets_vanish_after_normalization():
    data = synthesize(SynthSpec(**{**SMALL, "pose_noise": 0.0}))
    a, b = [v.frames for v in data.videos if v.label == 0][:2]
    assert not np.allclose(a, b)
    np.testing.assert_allclose(normalize_pose(a), normalize_pose(b), atol=1e-9)


def test_label_counts_and_shared_items():
    data = synthesize(SynthSpec())
    for v in data.videos:
        per = data.labels[v.video_id]
        assert 3 <= len(per) <= 10
        assert all(0 < s <= 1 for s in per.values())
        for iid, owners in data.item_class.items():
            if iid.startswith("item-shared") and v.label in owners:
                assert iid in per
    shared = [o for i, o in data.item_class.items() if i.startswith("item-shared")]
    assert shared and all(len(o) >= 2 for o in shared)
    assert {c for o in data.item_class.values() for c in o} == set(range(8))
    data.dataset().check_references()


def test_generator_files_are_deterministic(tmp_path):
    spec = SynthSpec(**SMALL)
    a = generate_synthetic(spec, tmp_path / "a")
    b = generate_synthetic(spec, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    ds = Dataset.load(*a)
    assert len(ds.videos) == 18 and len(ds.items) == 20


@pytest.mark.parametrize(
    "override",
    [dict(n_classes=0), dict(classes_per_shared=1), dict(min_labels=5, max_labels=3), dict(pose_noise=-1.0)],
)
def test_inconsistent_spec(override):
    with pytest.raises(SpecError):
        synthesize(SynthSpec(**{**SMALL, **override}))
    with pytest.raises(SpecError):
        SynthSpec.from_mapping({"nonsense": "1"})


def test_linear_probe_separates_classes():
    data = synthesize(SynthSpec())
    feats, labels = [], []
    for v in data.videos:
        for s in range(0, v.n_frames - 10 + 1, 5):
            feats.append(normalize_pose(v.frames[s : s + 10]).mean(axis=0).ravel())
            labels.append(v.label)
    x = np.hstack([np.array(feats), np.ones((len(feats), 1))])
    y = np.array(labels)
    ids = [v.video_id for v in data.videos for _ in range(0, v.n_frames - 10 + 1, 5)]
    tr, _, te = split_dataset(data.videos, seed=0)
    tr, te = set(tr), set(te)
    train = np.array([i in tr for i in ids])
    test = np.array([i in te for i in ids])
    w, *_ = np.linalg.lstsq(x[train], np.eye(8)[y[train]], rcond=None)
    accuracy = float(np.mean(np.argmax(x[test] @ w, axis=1) == y[test]))
    assert accuracy > 0.9, accuracy
