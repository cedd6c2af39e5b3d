"""Tensor container round trips and strict failure modes."""

import struct

import numpy as np
import pytest

from talkdiff.tensorfile import MAGIC, TensorFileError, load_tensors, save_tensors


def test_roundtrip_f64(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)),
        "b.nested/name": rng.standard_normal(7),
        "scalarish": np.array([1.5]),
    }
    path = tmp_path / "t.sdtf"
    save_tensors(path, tensors)
    out = load_tensors(path)
    assert set(out) == set(tensors)
    for k in tensors:
        assert out[k].dtype == np.float64
        assert np.array_equal(out[k], tensors[k])  # bit-exact


def test_roundtrip_f32(tmp_path, rng):
    t = {"x": rng.standard_normal((5, 2)).astype(np.float32)}
    save_tensors(tmp_path / "t.sdtf", t)
    out = load_tensors(tmp_path / "t.sdtf")
    assert out["x"].dtype == np.float32
    assert np.array_equal(out["x"], t["x"])


def test_high_rank_and_empty_dim(tmp_path, rng):
    t = {"four_d": rng.standard_normal((2, 3, 4, 5)), "empty": np.zeros((0, 3))}
    save_tensors(tmp_path / "t.sdtf", t)
    out = load_tensors(tmp_path / "t.sdtf")
    assert out["four_d"].shape == (2, 3, 4, 5)
    assert out["empty"].shape == (0, 3)


def test_empty_file_is_header_error(tmp_path):
    path = tmp_path / "empty.sdtf"
    path.write_bytes(b"")
    with pytest.raises(TensorFileError, match="too short"):
        load_tensors(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.sdtf"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(TensorFileError, match="magic"):
        load_tensors(path)


def test_truncated_payload(tmp_path):
    # header declares a 4x10 float64 tensor but the payload holds 39 values
    name = b"tokens"
    blob = MAGIC + struct.pack("<HH", 1, 1)
    blob += struct.pack("<H", len(name)) + name
    blob += struct.pack("<B", 2) + struct.pack("<II", 4, 10) + struct.pack("<B", 1)
    blob += np.zeros(39).tobytes()
    path = tmp_path / "trunc.sdtf"
    path.write_bytes(blob)
    with pytest.raises(TensorFileError, match="truncated"):
        load_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "trail.sdtf"
    save_tensors(path, {"x": np.zeros(2)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TensorFileError, match="trailing"):
        load_tensors(path)


def test_unknown_dtype_tag(tmp_path):
    name = b"x"
    blob = MAGIC + struct.pack("<HH", 1, 1)
    blob += struct.pack("<H", len(name)) + name
    blob += struct.pack("<B", 1) + struct.pack("<I", 1) + struct.pack("<B", 9)
    blob += np.zeros(1).tobytes()
    path = tmp_path / "dtype.sdtf"
    path.write_bytes(blob)
    with pytest.raises(TensorFileError, match="dtype"):
        load_tensors(path)


def test_rejects_non_float_dtypes(tmp_path):
    with pytest.raises(TensorFileError, match="dtype"):
        save_tensors(tmp_path / "t.sdtf", {"x": np.arange(3)})


def test_rejects_zero_tensors(tmp_path):
    with pytest.raises(TensorFileError):
        save_tensors(tmp_path / "t.sdtf", {})


def test_random_roundtrips_bitwise(tmp_path, rng):
    for trial in range(20):
        n_tensors = int(rng.integers(1, 5))
        tensors = {}
        for j in range(n_tensors):
            rank = int(rng.integers(0, 4))
            shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
            dtype = np.float32 if rng.random() < 0.5 else np.float64
            tensors[f"t{j}"] = rng.standard_normal(shape).astype(dtype)
        path = tmp_path / f"r{trial}.sdtf"
        save_tensors(path, tensors)
        out = load_tensors(path)
        for k, v in tensors.items():
            assert out[k].dtype == v.dtype
            assert np.array_equal(out[k], v)
