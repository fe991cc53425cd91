"""Binary checkpoint format: bit-exact round trips and hard failures."""

import struct

import numpy as np
import pytest

from ditr.checkpoint import MAGIC, CheckpointError, load_arrays, save_arrays


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {
        "enc.w": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "enc.b": np.zeros(3, np.float32),
        "scalar": np.array([1.5], np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"x": np.arange(4, dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<HI", raw, 4)
    assert version == 1 and count == 1
    (nlen,) = struct.unpack_from("<H", raw, 10)
    assert raw[12 : 12 + nlen] == b"x"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_arrays(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"x": np.arange(64, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        load_arrays(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"x": np.arange(4, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_arrays(path)
