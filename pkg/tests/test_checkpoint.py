"""Checkpoint container: exact round-trips, byte stability, strict validation."""

import hashlib
import struct

import numpy as np
import pytest

from liftview.checkpoint import MAGIC, CheckpointError, load_tensors, save_tensors
from liftview.tensor import Tensor


def _sample_state(rng):
    return {
        "encoder.weight": rng.normal(size=(4, 3, 3, 3)),
        "encoder.bias": rng.normal(size=(4,)),
        "scalar": np.array(3.5),
        "mlp.0.weight": rng.normal(size=(8, 8)),
    }


def test_roundtrip_is_exact(tmp_path):
    state = _sample_state(np.random.default_rng(0))
    p = tmp_path / "model.lrtn"
    save_tensors(p, state)
    loaded = load_tensors(p)
    assert sorted(loaded) == sorted(state)
    for k in state:
        assert np.array_equal(loaded[k], np.asarray(state[k], dtype=np.float64))
        assert loaded[k].dtype == np.float64


def test_accepts_tensor_values(tmp_path):
    p = tmp_path / "t.lrtn"
    save_tensors(p, {"w": Tensor(np.eye(3), requires_grad=True)})
    assert np.array_equal(load_tensors(p)["w"], np.eye(3))


def test_bytes_stable_across_saves_and_dict_order(tmp_path):
    state = _sample_state(np.random.default_rng(1))
    shuffled = dict(reversed(list(state.items())))
    pa, pb = tmp_path / "a.lrtn", tmp_path / "b.lrtn"
    save_tensors(pa, state)
    save_tensors(pb, shuffled)
    da, db = pa.read_bytes(), pb.read_bytes()
    assert hashlib.sha256(da).digest() == hashlib.sha256(db).digest()
    assert da[:4] == MAGIC


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.lrtn"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(p)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "trunc.lrtn"
    save_tensors(p, {"w": np.ones((4, 4))})
    blob = p.read_bytes()
    p.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "trail.lrtn"
    save_tensors(p, {"w": np.ones(2)})
    p.write_bytes(p.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_tensors(p)


def test_unsupported_version_rejected(tmp_path):
    p = tmp_path / "ver.lrtn"
    save_tensors(p, {"w": np.ones(2)})
    blob = bytearray(p.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_tensors(p)


def test_empty_state_roundtrips(tmp_path):
    p = tmp_path / "empty.lrtn"
    save_tensors(p, {})
    assert load_tensors(p) == {}
