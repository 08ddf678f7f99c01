import numpy as np
import pytest

from bevlift.checkpoint import (MAGIC, frozen_blob_bytes, load_records,
                                load_store, save_records, save_store)
from bevlift.params import Parameter, ParameterStore


def small_store():
    store = ParameterStore()
    store.add("a.w", np.ones((2, 3), dtype=np.float32))
    store.add("a.b", np.zeros(2, dtype=np.float32))
    store.add("b.w", np.full((3,), 2.0, dtype=np.float32), frozen=True)
    return store


class TestParameter:
    def test_freeze_clears_grad_and_requires(self):
        p = Parameter(np.ones(3, dtype=np.float32), "x")
        p.tensor.grad = np.ones(3, dtype=np.float32)
        p.freeze()
        assert p.frozen and not p.tensor.requires_grad
        assert p.tensor.grad is None
        p.unfreeze()
        assert not p.frozen and p.tensor.requires_grad


class TestStore:
    def test_duplicate_name_rejected(self):
        store = small_store()
        with pytest.raises(ValueError):
            store.add("a.w", np.zeros(1, dtype=np.float32))

    def test_lookup_and_iteration(self):
        store = small_store()
        assert "a.w" in store and "zzz" not in store
        assert len(store) == 3
        assert store["b.w"].frozen
        assert store.names() == ["a.w", "a.b", "b.w"]

    def test_trainable_frozen_partition(self):
        store = small_store()
        assert {p.name for p in store.trainable()} == {"a.w", "a.b"}
        assert {p.name for p in store.frozen()} == {"b.w"}
        assert store.num_trainable() == 8

    def test_matching_prefixes(self):
        store = small_store()
        assert {p.name for p in store.matching(["a."])} == {"a.w", "a.b"}

    def test_apply_plan(self):
        store = small_store()
        store.apply_plan(["b."], ["a."])
        assert not store["b.w"].frozen
        assert store["a.w"].frozen and store["a.b"].frozen

    def test_apply_plan_uncovered_raises(self):
        store = small_store()
        with pytest.raises(ValueError):
            store.apply_plan(["a."], [])

    def test_apply_plan_overlap_raises(self):
        store = small_store()
        with pytest.raises(ValueError):
            store.apply_plan(["a."], ["a.w"])

    def test_freeze_all(self):
        store = small_store()
        store.freeze_all()
        assert not store.trainable()

    def test_load_arrays_shape_mismatch(self):
        store = small_store()
        with pytest.raises(ValueError):
            store.load_arrays({"a.w": np.zeros((9, 9), dtype=np.float32)})
        with pytest.raises(KeyError):
            store.load_arrays({"nope": np.zeros(1, dtype=np.float32)})


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path, rng):
        arrays = {"x": rng.standard_normal((3, 4)).astype(np.float32),
                  "y": rng.standard_normal(7).astype(np.float32)}
        p = tmp_path / "c.ckpt"
        save_records(str(p), arrays, frozen={"y": True}, meta={"k": "v"})
        back, frozen, meta = load_records(str(p))
        assert np.array_equal(back["x"], arrays["x"])
        assert np.array_equal(back["y"], arrays["y"])
        assert frozen == {"x": False, "y": True}
        assert meta == {"k": "v"}

    def test_magic_enforced(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTMAGIC" + b"\0" * 32)
        with pytest.raises(ValueError):
            load_records(str(p))

    def test_file_starts_with_magic(self, tmp_path):
        p = tmp_path / "c.ckpt"
        save_records(str(p), {"x": np.zeros(2, dtype=np.float32)})
        assert p.read_bytes()[:8] == MAGIC

    def test_byte_identical_resave(self, tmp_path, rng):
        arrays = {"x": rng.standard_normal((5, 5)).astype(np.float32)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_records(str(p1), arrays)
        save_records(str(p2), {"x": load_records(str(p1))[0]["x"]})
        assert p1.read_bytes() == p2.read_bytes()

    def test_frozen_blob_bytes(self, tmp_path, rng):
        x = rng.standard_normal(4).astype(np.float32)
        y = rng.standard_normal(3).astype(np.float32)
        p = tmp_path / "c.ckpt"
        save_records(str(p), {"x": x, "y": y}, frozen={"x": True})
        chunks = frozen_blob_bytes(str(p))
        assert [name for name, _ in chunks] == ["x"]
        assert chunks[0][1] == x.tobytes()


class TestStoreCheckpointing:
    def test_save_load_store(self, tmp_path, rng):
        store = small_store()
        store["a.w"].tensor.data = rng.standard_normal((2, 3)).astype(np.float32)
        p = tmp_path / "s.ckpt"
        save_store(str(p), store, meta={"stage": "test"})
        fresh = small_store()
        meta = load_store(str(p), fresh)
        assert meta["stage"] == "test"
        assert np.array_equal(fresh["a.w"].data, store["a.w"].data)
        assert fresh["b.w"].frozen

    def test_restore_freeze_optional(self, tmp_path):
        store = small_store()
        p = tmp_path / "s.ckpt"
        store["a.w"].freeze()
        save_store(str(p), store)
        fresh = small_store()
        load_store(str(p), fresh, restore_freeze=False)
        assert not fresh["a.w"].frozen    # original flag kept

    def test_strict_missing_raises(self, tmp_path):
        p = tmp_path / "s.ckpt"
        save_records(str(p), {"a.w": np.ones((2, 3), dtype=np.float32)})
        with pytest.raises(KeyError):
            load_store(str(p), small_store())
        load_store(str(p), small_store(), strict=False)
