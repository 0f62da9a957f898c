import numpy as np
import pytest

from lcd_forge.checkpoint import CheckpointError, load_checkpoint, read_meta, save_checkpoint


def test_round_trip_is_bitwise(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32), "s": np.float64(2.5)}
    save_checkpoint(tmp_path / "ck", arrays, {"step": 7, "cfg": {"x": [1, 2]}})
    back, meta = load_checkpoint(tmp_path / "ck")
    assert list(back) == ["a", "b", "s"]
    for k in arrays:
        assert back[k].dtype == np.asarray(arrays[k]).dtype
        assert np.array_equal(back[k], arrays[k])
    assert meta == {"step": 7, "cfg": {"x": [1, 2]}}
    assert read_meta(tmp_path / "ck") == meta


def test_same_content_same_bytes(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "a", arrays, {"k": 1})
    save_checkpoint(tmp_path / "b", arrays, {"k": 1})
    for ext in (".manifest", ".bin"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_rejects_bad_names_and_dtypes(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", {"a b": np.zeros(1)})
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x", {"i": np.zeros(2, dtype=np.int64)})


def test_detects_truncation_and_missing_files(tmp_path):
    save_checkpoint(tmp_path / "ck", {"w": np.zeros(10)})
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="too short"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")
