import numpy as np
import pytest

from cmc_forge import container
from cmc_forge.errors import ContractError


def test_round_trip_multiple_dtypes(tmp_path):
    path = tmp_path / "blob.bin"
    tensors = {
        "f64": np.random.default_rng(0).normal(size=(3, 4, 5)),
        "f32": np.arange(6, dtype=np.float32).reshape(2, 3),
        "i64": np.array([[-(2**40)], [2**40]]),
        "i32": np.array([1, -2, 3], dtype=np.int32),
        "u8": np.array([0, 255, 7], dtype=np.uint8),
        "bools": np.array([True, False, True]),
        "scalar0d": np.array(3.5),
    }
    meta = {"kind": "test", "note": "hello", "numbers": [1, 2, 3]}
    container.save_tensors(path, tensors, meta)

    loaded, loaded_meta = container.load_tensors(path)
    assert loaded_meta == meta
    assert set(loaded) == set(tensors)
    np.testing.assert_array_equal(loaded["f64"], tensors["f64"])
    np.testing.assert_array_equal(loaded["f32"], tensors["f32"])
    np.testing.assert_array_equal(loaded["i64"], tensors["i64"])
    np.testing.assert_array_equal(loaded["i32"], tensors["i32"])
    np.testing.assert_array_equal(loaded["u8"], tensors["u8"])
    np.testing.assert_array_equal(loaded["bools"], tensors["bools"].astype(np.uint8))
    assert loaded["f64"].dtype == np.float64
    assert loaded["scalar0d"].shape == ()


def test_sidecar_written(tmp_path):
    path = tmp_path / "blob.bin"
    container.save_tensors(path, {"x": np.zeros(3)}, {"k": 1})
    sidecar = tmp_path / "blob.bin.json"
    assert sidecar.exists()
    assert '"shape": [3]' in sidecar.read_text().replace("\n  ", " ").replace("\n", "")


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContractError):
        container.load_tensors(path)


def test_infinities_survive(tmp_path):
    path = tmp_path / "depth.bin"
    depth = np.array([1.0, np.inf, 2.5])
    container.save_tensors(path, {"depth": depth}, {})
    loaded, _ = container.load_tensors(path)
    np.testing.assert_array_equal(loaded["depth"], depth)
