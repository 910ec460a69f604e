"""Binary container format and checkpoint round-trips."""

import json

import numpy as np
import pytest

from pvt import mdtc, sv
from pvt.container import (ContainerError, FORMAT_VERSION, MAGIC,
                           config_hash, load_checkpoint, read_container,
                           save_checkpoint, write_container)
from pvt.nn.optim import OptimizerState, adam_step
from pvt.nn.tensor import ParamStore


class TestContainer:
    def test_roundtrip_values_and_dtypes(self, tmp_path, rng):
        tensors = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "b": rng.normal(size=7).astype(np.float64),
            "c": np.arange(5, dtype=np.int64),
            "scalar": np.float32(2.5),
        }
        path = tmp_path / "t.pvtk"
        write_container(path, tensors, attrs={"note": "x"})
        back, attrs = read_container(path)
        assert attrs == {"note": "x"}
        for name, arr in tensors.items():
            assert back[name].dtype == np.asarray(arr).dtype
            assert np.array_equal(back[name], np.asarray(arr))

    def test_header_layout(self, tmp_path):
        path = tmp_path / "t.pvtk"
        write_container(path, {"x": np.zeros(2, dtype=np.float32)})
        raw = path.read_bytes()
        assert raw.startswith(MAGIC)
        assert int.from_bytes(raw[5:9], "little") == FORMAT_VERSION
        meta_len = int.from_bytes(raw[9:17], "little")
        meta = json.loads(raw[17:17 + meta_len])
        assert meta["tensors"][0]["name"] == "x"
        assert meta["tensors"][0]["dtype"] == "f32"
        assert meta["tensors"][0]["offset"] % 8 == 0

    def test_offsets_aligned(self, tmp_path, rng):
        # f32 tensor of odd byte length forces padding before the next one
        tensors = {"a": np.zeros(3, dtype=np.float32),
                   "b": np.zeros(2, dtype=np.float64)}
        path = tmp_path / "t.pvtk"
        write_container(path, tensors)
        _, _ = read_container(path)
        meta_len = int.from_bytes(path.read_bytes()[9:17], "little")
        meta = json.loads(path.read_bytes()[17:17 + meta_len])
        for entry in meta["tensors"]:
            assert entry["offset"] % 8 == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pvtk"
        path.write_bytes(b"NOTPK" + b"\x00" * 20)
        with pytest.raises(ContainerError, match="magic"):
            read_container(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.pvtk"
        path.write_bytes(MAGIC + (99).to_bytes(4, "little") + (0).to_bytes(8, "little"))
        with pytest.raises(ContainerError, match="version"):
            read_container(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "bad.pvtk"
        path.write_bytes(MAGIC)
        with pytest.raises(ContainerError, match="too short"):
            read_container(path)

    def test_truncated_metadata(self, tmp_path):
        path = tmp_path / "bad.pvtk"
        path.write_bytes(MAGIC + (1).to_bytes(4, "little")
                         + (1000).to_bytes(8, "little") + b"{}")
        with pytest.raises(ContainerError, match="truncated metadata"):
            read_container(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "t.pvtk"
        write_container(path, {"x": rng.normal(size=100).astype(np.float32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-50])
        with pytest.raises(ContainerError, match="past payload end"):
            read_container(path)

    def test_malformed_json(self, tmp_path):
        meta = b"{not json"
        path = tmp_path / "bad.pvtk"
        path.write_bytes(MAGIC + (1).to_bytes(4, "little")
                         + len(meta).to_bytes(8, "little") + meta)
        with pytest.raises(ContainerError, match="malformed metadata"):
            read_container(path)

    def test_unsupported_dtype_on_write(self, tmp_path):
        with pytest.raises(ContainerError, match="unsupported dtype"):
            write_container(tmp_path / "t.pvtk", {"x": np.zeros(2, dtype=np.int16)})


class TestConfigHash:
    def test_stable_and_order_independent(self):
        a = config_hash({"x": 1, "y": [1, 2]})
        b = config_hash({"y": [1, 2], "x": 1})
        assert a == b
        assert len(a) == 16

    def test_sensitive_to_values(self):
        assert config_hash({"x": 1}) != config_hash({"x": 2})


class TestCheckpoint:
    def test_roundtrip_bit_identical_posteriors(self, tmp_path, rng):
        cfg = mdtc.MdtcConfig(input_dim=6, channels=8, stacks=1,
                              dilations=(1, 2), kernel=3, se_reduction=2,
                              se_window=4)
        model = mdtc.build_model(cfg, seed=3)
        x = rng.normal(size=(1, 6, 20))
        # perturb running stats so buffers matter
        model.forward_batch(x, train=True)
        y_before = model.forward_batch(x)
        h = config_hash(vars(cfg))
        path = tmp_path / "kws.pvtk"
        save_checkpoint(path, model.store, h)
        restored = mdtc.build_model(cfg, seed=999)  # different init
        load_checkpoint(path, restored.store, expected_hash=h)
        y_after = restored.forward_batch(x)
        assert np.array_equal(y_before, y_after)

    def test_roundtrip_bit_identical_embeddings(self, tmp_path, rng):
        cfg = sv.SvConfig(stages=sv.TINY_STAGES, input_dim=8, embedding_dim=4,
                          attention_dim=2, se_reduction=2, n_classes=2)
        model = sv.build_extractor(cfg, seed=1)
        x = rng.normal(size=(1, 1, 8, 16))
        emb_before = model.forward_embed(x)
        path = tmp_path / "sv.pvtk"
        save_checkpoint(path, model.store, "h")
        restored = sv.build_extractor(cfg, seed=2)
        load_checkpoint(path, restored.store, expected_hash="h")
        assert np.array_equal(emb_before, restored.forward_embed(x))

    def test_hash_mismatch_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(3))
        path = tmp_path / "c.pvtk"
        save_checkpoint(path, store, "aaaa")
        with pytest.raises(ContainerError, match="hash mismatch"):
            load_checkpoint(path, store, expected_hash="bbbb")

    def test_optimizer_slots_saved(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(2))
        store.grads["w"][...] = 1.0
        state = OptimizerState(kind="adam", lr=0.01)
        adam_step(store, state)
        path = tmp_path / "c.pvtk"
        save_checkpoint(path, store, "h", optimizer_state=state)
        tensors, attrs = read_container(path)
        assert "opt/w.m" in tensors and "opt/w.v" in tensors
        assert attrs["optimizer"]["kind"] == "adam"
        assert attrs["optimizer"]["step"] == 1

    def test_unknown_tensor_warns_and_is_ignored(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(2))
        path = tmp_path / "c.pvtk"
        write_container(path, {"param/w": np.full(2, 3.0, dtype=np.float32),
                               "param/ghost": np.zeros(4, dtype=np.float32),
                               "mystery": np.zeros(1, dtype=np.float32)},
                        attrs={"config_hash": "h"})
        with pytest.warns(UserWarning, match="unknown"):
            load_checkpoint(path, store, expected_hash="h")
        assert np.all(store.params["w"] == 3.0)

    def test_missing_parameter_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(2))
        store.add("v", np.ones(2))
        path = tmp_path / "c.pvtk"
        write_container(path, {"param/w": np.ones(2, dtype=np.float32)},
                        attrs={"config_hash": "h"})
        with pytest.raises(KeyError):
            load_checkpoint(path, store)

    def test_shape_mismatch_rejected(self, tmp_path):
        store = ParamStore()
        store.add("w", np.ones(2))
        path = tmp_path / "c.pvtk"
        write_container(path, {"param/w": np.ones(3, dtype=np.float32)},
                        attrs={})
        with pytest.raises(ValueError, match="shape mismatch"):
            load_checkpoint(path, store)
