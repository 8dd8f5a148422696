import numpy as np
import pytest

from moesim.params_io import ContainerError, load_tensors, save_tensors


def test_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(31)
    tensors = {
        "block00.attn.wo": rng.standard_normal((8, 8)).astype(np.float32),
        "block01.moe.expert03.w1": rng.standard_normal((8, 16)).astype(np.float32),
        "patch_embed.bias": rng.standard_normal(8).astype(np.float32),
    }
    path = tmp_path / "params.bin"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], tensors[name])


def test_saving_twice_produces_identical_bytes(tmp_path):
    rng = np.random.default_rng(37)
    tensors = {f"t{i}": rng.standard_normal((3, 5)).astype(np.float32) for i in range(4)}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_tensors(p1, tensors)
    # insertion order must not matter
    save_tensors(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_container(tmp_path):
    path = tmp_path / "empty.bin"
    save_tensors(path, {})
    assert load_tensors(path) == {}


def test_rejects_non_float32(tmp_path):
    with pytest.raises(ContainerError):
        save_tensors(tmp_path / "x.bin", {"t": np.zeros(3, dtype=np.float64)})


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(ContainerError):
        load_tensors(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "x.bin"
    save_tensors(path, {"t": np.ones((4, 4), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ContainerError):
        load_tensors(path)
