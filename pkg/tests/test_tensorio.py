import numpy as np
import pytest

from demixlab import tensorio


def test_shard_round_trip(tmp_path):
    examples = [
        (
            {"idx": 0, "tags": ["a", "b"]},
            [("x", np.arange(6, dtype=np.float32).reshape(2, 3)), ("y", np.ones(4, np.float32))],
        ),
        ({"idx": 1}, [("x", np.zeros((1, 2, 2), np.float32))]),
    ]
    path = tmp_path / "s.dsmx"
    tensorio.write_shard(path, examples)
    back = tensorio.read_shard(path)
    assert len(back) == 2
    meta0, tensors0 = back[0]
    assert meta0["idx"] == 0 and meta0["tensors"] == ["x", "y"]
    np.testing.assert_array_equal(tensors0["x"], examples[0][1][0][1])
    assert tensorio.shard_example_count(path) == 2


def test_write_is_deterministic(tmp_path):
    ex = [({"k": 3}, [("t", np.linspace(0, 1, 7, dtype=np.float32))])]
    tensorio.write_shard(tmp_path / "a.dsmx", ex)
    tensorio.write_shard(tmp_path / "b.dsmx", ex)
    assert (tmp_path / "a.dsmx").read_bytes() == (tmp_path / "b.dsmx").read_bytes()


def test_magic_checked(tmp_path):
    path = tmp_path / "bad.dsmx"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a DSMX"):
        tensorio.read_shard(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "s.dsmx"
    tensorio.write_shard(path, [({"a": 1}, [("x", np.ones(100, np.float32))])])
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ValueError, match="truncated"):
        tensorio.read_shard(path)


def test_tensor_container(tmp_path):
    path = tmp_path / "c.ckpt"
    tensors = {"w": np.ones((3, 3), np.float32), "b": np.zeros(3, np.float32)}
    tensorio.save_tensors(path, tensors, {"step": 5})
    back, meta = tensorio.load_tensors(path)
    assert meta["step"] == 5
    np.testing.assert_array_equal(back["w"], tensors["w"])
