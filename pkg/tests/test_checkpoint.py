import numpy as np
import pytest

from servopb.checkpoint import CheckpointError, load_arrays, save_arrays


def test_roundtrip_preserves_values_and_dtypes(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {
        "weights/w1": rng.normal(size=(4, 7)),
        "weights/b1": rng.normal(size=(7,)),
        "counts": np.arange(5, dtype=np.int64),
        "frame": rng.integers(0, 256, size=(8, 6, 3)).astype(np.uint8),
    }
    meta = {"epoch": 12, "loss": 0.125}
    save_arrays(tmp_path / "ck.bin", arrays, meta)
    loaded, got_meta = load_arrays(tmp_path / "ck.bin")
    assert got_meta == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_identical_content_identical_bytes(tmp_path):
    rng = np.random.default_rng(9)
    arrays = {"a": rng.normal(size=(16, 16)), "b": np.arange(3, dtype=np.int64)}
    save_arrays(tmp_path / "one.bin", arrays, {"k": 1})
    save_arrays(tmp_path / "two.bin", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "one.bin").read_bytes() == (tmp_path / "two.bin").read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_arrays(p)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_arrays(tmp_path / "x.bin", {"a": np.zeros(2, dtype=np.float32)})


def test_truncated_payload_rejected(tmp_path):
    p = tmp_path / "ck.bin"
    save_arrays(p, {"a": np.ones((100, 100))})
    blob = p.read_bytes()
    p.write_bytes(blob[:-64])
    with pytest.raises(CheckpointError):
        load_arrays(p)


def test_loaded_arrays_are_writable_copies(tmp_path):
    p = tmp_path / "ck.bin"
    save_arrays(p, {"a": np.zeros(4)})
    loaded, _ = load_arrays(p)
    loaded["a"][0] = 5.0  # must not raise
