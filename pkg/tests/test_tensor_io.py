"""RMTT binary tensor format round-trips and error handling."""

import struct

import numpy as np
import pytest

from memvqa.tensor_io import TensorFileError, read_tensor, write_tensor


def test_round_trip_shapes(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(), (5,), (3, 4), (2, 3, 4, 5)]:
        arr = rng.normal(size=shape).astype(np.float32)
        path = tmp_path / "t.rmtt"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


def test_layout_bytes(tmp_path):
    path = tmp_path / "t.rmtt"
    write_tensor(path, np.array([[1.0, 2.0]], dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"RMTT"
    version, dtype, ndim = raw[4], raw[5], raw[6]
    assert (version, dtype, ndim) == (1, 0, 2)
    dims = struct.unpack("<2q", raw[7:23])
    assert dims == (1, 2)
    assert np.frombuffer(raw[23:], dtype="<f4").tolist() == [1.0, 2.0]


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.rmtt"
    path.write_bytes(b"NOPE" + b"\x00" * 10)
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.rmtt"
    write_tensor(path, np.ones((4, 4), dtype=np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "t.rmtt"
    write_tensor(path, np.ones(3, dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_unsupported_dtype_code(tmp_path):
    path = tmp_path / "t.rmtt"
    write_tensor(path, np.ones(1, dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[5] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFileError):
        read_tensor(path)
