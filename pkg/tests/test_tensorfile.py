"""Bit-exact round trips and wire-format details of the tensor container."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion.errors import InputError
from mmfusion import tensorfile as tf


def test_header_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "t.mmft"
    tf.save_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"MMFT"
    version, dtype_code, rank = struct.unpack("<III", raw[4:16])
    assert (version, dtype_code, rank) == (1, 1, 2)
    assert struct.unpack("<2Q", raw[16:32]) == (2, 3)
    assert raw[32:] == arr.astype("<f4").tobytes()


def test_float64_code(tmp_path):
    path = tmp_path / "t.mmft"
    tf.save_tensor(path, np.zeros(2, dtype=np.float64))
    assert struct.unpack("<I", path.read_bytes()[8:12])[0] == 2


def test_rank_zero_scalar(tmp_path):
    path = tmp_path / "s.mmft"
    tf.save_tensor(path, np.asarray(3.25, dtype=np.float64))
    back = tf.load_tensor(path)
    assert back.shape == () and back == 3.25


@settings(max_examples=40, deadline=None)
@given(
    shape=st.lists(st.integers(1, 5), min_size=0, max_size=4),
    use_f64=st.booleans(),
    data=st.data(),
)
def test_round_trip_bit_exact(shape, use_f64, data):
    dtype = np.float64 if use_f64 else np.float32
    n = int(np.prod(shape)) if shape else 1
    values = data.draw(st.lists(
        st.floats(allow_nan=False, allow_infinity=False, width=32),
        min_size=n, max_size=n))
    arr = np.asarray(values, dtype=dtype).reshape(shape)
    buf = io.BytesIO()
    tf.write_tensor(buf, arr)
    buf.seek(0)
    back = tf.read_tensor(buf)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert arr.tobytes() == back.tobytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.mmft"
    path.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(InputError):
        tf.load_tensor(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "t.mmft"
    tf.save_tensor(path, np.zeros((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(InputError):
        tf.load_tensor(path)


def test_integer_dtype_rejected(tmp_path):
    with pytest.raises(InputError):
        tf.save_tensor(tmp_path / "i.mmft", np.zeros(3, dtype=np.int32))


def test_named_container_round_trip(tmp_path):
    digest = bytes(range(32))
    items = {
        "param.stem.weight": np.random.default_rng(0).standard_normal((2, 3)).astype(np.float32),
        "meta.epoch": np.asarray(4.0),
    }
    path = tmp_path / "c.mmck"
    tf.save_named_tensors(path, digest, items)
    got_digest, got = tf.load_named_tensors(path)
    assert got_digest == digest
    assert set(got) == set(items)
    for key in items:
        assert np.array_equal(got[key], items[key])
        assert got[key].dtype == items[key].dtype
    assert path.read_bytes()[:4] == b"MMCK"
