import json

import numpy as np
import pytest

from retrofit.checkpoint import MAGIC, load_manifest, load_tensors, manifest_path, save_tensors
from retrofit.errors import DataError, MissingCheckpoint


def test_tensors_roundtrip_exactly(tmp_path, rng):
    tensors = {
        "scalar": np.array(3.25),
        "vector": rng.normal(size=7),
        "cube": rng.normal(size=(2, 3, 4)),
        "räume/ü": np.arange(6, dtype=float).reshape(3, 2),
    }
    path = tmp_path / "model.rfnt"
    save_tensors(path, tensors, {"epoch": 3})

    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        np.testing.assert_array_equal(loaded[name], value)

    manifest = load_manifest(path)
    assert manifest["format"] == "RFNT"
    assert manifest["epoch"] == 3
    assert manifest_path(path).name == "model.json"


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_tensors(tmp_path / "absent.rfnt")
    with pytest.raises(MissingCheckpoint):
        load_manifest(tmp_path / "absent.rfnt")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.rfnt"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(DataError):
        load_tensors(path)


def test_truncated_data(tmp_path, rng):
    path = tmp_path / "t.rfnt"
    save_tensors(path, {"w": rng.normal(size=100)})
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    path.write_bytes(data[:-16])
    with pytest.raises(DataError):
        load_tensors(path)


def test_save_without_manifest_leaves_no_json(tmp_path):
    path = tmp_path / "plain.rfnt"
    save_tensors(path, {"a": np.ones(2)})
    assert not manifest_path(path).exists()
    assert not list(tmp_path.glob("*.tmp"))


def test_manifest_is_plain_json(tmp_path):
    path = tmp_path / "m.rfnt"
    save_tensors(path, {}, {"sources": ["a", "b"]})
    assert json.loads(manifest_path(path).read_text())["sources"] == ["a", "b"]
    assert load_tensors(path) == {}
