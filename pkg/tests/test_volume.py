import struct

import numpy as np
import pytest

from otdeconv.errors import FormatError
from otdeconv.volume import (Volume, encode_volume, file_digest, read_checkpoint, read_volume, write_checkpoint,
                             write_volume)


def f32_values(rng, shape):
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def test_volume_roundtrip_bit_exact(tmp_path):
    v = Volume(f32_values(np.random.default_rng(0), (3, 4, 5)), voxel_size=(2e-7, 1e-7, 1e-7))
    write_volume(tmp_path / "v.otdv", v)
    back = read_volume(tmp_path / "v.otdv")
    np.testing.assert_array_equal(back.data, v.data)
    assert back.voxel_size == v.voxel_size
    write_volume(tmp_path / "w.otdv", back)
    assert file_digest(tmp_path / "v.otdv") == file_digest(tmp_path / "w.otdv")


def test_header_layout():
    buf = encode_volume(Volume(np.zeros((2, 3, 4)), voxel_size=(1.0, 2.0, 3.0)))
    magic, version, d, h, w, vz, vy, vx = struct.unpack_from("<4sH3I3d", buf)
    assert (magic, version, d, h, w, vz, vy, vx) == (b"OTDV", 1, 2, 3, 4, 1.0, 2.0, 3.0)
    assert len(buf) == struct.calcsize("<4sH3I3d") + 4 * 24


def test_z_major_ordering(tmp_path):
    d = np.arange(24, dtype=float).reshape(2, 3, 4)
    buf = encode_volume(Volume(d))
    payload = np.frombuffer(buf[-96:], dtype="<f4")
    np.testing.assert_array_equal(payload, np.arange(24))


def test_missing_voxel_size_is_none(tmp_path):
    write_volume(tmp_path / "v.otdv", Volume(np.zeros((2, 2, 2))))
    assert read_volume(tmp_path / "v.otdv").voxel_size is None


def test_format_errors(tmp_path):
    (tmp_path / "bad.otdv").write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(FormatError, match="not an OTDV"):
        read_volume(tmp_path / "bad.otdv")
    (tmp_path / "short.otdv").write_bytes(b"OT")
    with pytest.raises(FormatError, match="truncated"):
        read_volume(tmp_path / "short.otdv")
    good = encode_volume(Volume(np.zeros((2, 2, 2))))
    (tmp_path / "cut.otdv").write_bytes(good[:-4])
    with pytest.raises(FormatError):
        read_volume(tmp_path / "cut.otdv")
    with pytest.raises(FormatError):
        read_volume(tmp_path / "absent.otdv")


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"G.head.weight": f32_values(rng, (1, 8, 1, 1, 1)), "B.h": f32_values(rng, (9, 9, 9)),
               "scalar": f32_values(rng, ())}
    write_checkpoint(tmp_path / "c.otdv", tensors, {"step": 7})
    back, meta = read_checkpoint(tmp_path / "c.otdv")
    assert list(back) == list(tensors) and meta == {"step": 7}
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    write_checkpoint(tmp_path / "d.otdv", back, meta)
    assert file_digest(tmp_path / "c.otdv") == file_digest(tmp_path / "d.otdv")


def test_checkpoint_and_volume_not_confused(tmp_path):
    write_checkpoint(tmp_path / "c.otdv", {"a": np.zeros(2)})
    write_volume(tmp_path / "v.otdv", Volume(np.zeros((2, 2, 2))))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "c.otdv")
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "v.otdv")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    write_volume(tmp_path / "v.otdv", Volume(np.zeros((2, 2, 2))))
    assert [p.name for p in tmp_path.iterdir()] == ["v.otdv"]
