import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from poserec import checkpoint
from poserec.errors import FormatError


def test_header_layout():
    blob = checkpoint.encode({"w": np.arange(6.0).reshape(2, 3)})
    assert blob[:4] == b"PSRC"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 12) == (1,)
    assert blob[14:15] == b"w"
    assert struct.unpack_from("<BBII", blob, 15) == (1, 2, 2, 3)
    assert np.frombuffer(blob[25:], "<f8").tolist() == list(range(6))


@settings(max_examples=50, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=st.floats(allow_nan=False, width=32)),
        max_size=4,
    ),
    st.sampled_from(["<f4", "<f8"]),
)
def test_round_trip_is_byte_identical(tensors, dtype):
    blob = checkpoint.encode(tensors, dtype)
    back = checkpoint.decode(blob)
    assert list(back) == list(tensors)
    assert checkpoint.encode(back, dtype) == blob
    if dtype == "<f8":
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])


def test_corrupt_checkpoints():
    blob = checkpoint.encode({"a": np.ones(3), "b": np.zeros((2, 2))})
    for bad in (b"XXXX" + blob[4:], blob[:-1], blob + b"\0", blob[:12]):
        with pytest.raises(FormatError):
            checkpoint.decode(bad)
    with pytest.raises(FormatError):
        checkpoint.decode(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(FormatError):
        checkpoint.encode({"a": np.ones(2)}, dtype="<i4")


def test_save_writes_sidecar_and_leaves_no_temp_files(tmp_path):
    path = checkpoint.save(tmp_path / "m.psrc", {"x": np.ones(2)}, {"seed": 3})
    tensors, meta = checkpoint.load(path)
    assert meta == {"seed": 3} and tensors["x"].tolist() == [1.0, 1.0]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.psrc", "m.psrc.json"]
