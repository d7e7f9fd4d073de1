"""Checkpoint container: round trips, corruption detection, module loading."""

import numpy as np
import pytest
import torch

from ptmrec.checkpoint import (
    CheckpointState,
    load_checkpoint,
    load_into_module,
    module_arrays,
    save_checkpoint,
)
from ptmrec.errors import CheckpointError
from ptmrec.recommender import RecModel


class TestRoundTrip:
    def test_arrays_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        state = CheckpointState(
            arrays={
                "alpha": rng.normal(size=(3, 4)).astype(np.float32),
                "beta": rng.integers(0, 100, size=7).astype(np.int64),
                "gamma": rng.normal(size=(2, 2, 2)),
            },
            config={"d": 64, "nested": {"x": [1, 2]}},
            seed=42,
            stage="stage1",
            peft={"kind": "prompt", "depth": 2, "length": 4},
        )
        path = save_checkpoint(state, tmp_path / "model.ckpt")
        loaded = load_checkpoint(path)
        assert loaded.config == state.config
        assert loaded.seed == 42
        assert loaded.stage == "stage1"
        assert loaded.peft == state.peft
        for name, arr in state.arrays.items():
            assert loaded.arrays[name].tobytes() == arr.tobytes()
            assert loaded.arrays[name].dtype == arr.dtype

    def test_fresh_model_round_trip(self, tmp_path):
        model = RecModel(num_users=6, num_items=11, d=8, d_proj=4, seed=1)
        state = CheckpointState(arrays=module_arrays(model, "rec"), stage="stage1")
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "m.ckpt"))
        twin = RecModel(num_users=6, num_items=11, d=8, d_proj=4, seed=99)
        load_into_module(loaded, twin, "rec")
        for p1, p2 in zip(model.parameters(), twin.parameters()):
            assert torch.equal(p1, p2)

    def test_save_is_deterministic(self, tmp_path):
        arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4)}
        a = save_checkpoint(CheckpointState(arrays=arrays, seed=5), tmp_path / "a.ckpt")
        b = save_checkpoint(CheckpointState(arrays=arrays, seed=5), tmp_path / "b.ckpt")
        assert a.read_bytes() == b.read_bytes()


class TestCorruption:
    def make(self, tmp_path):
        state = CheckpointState(arrays={"w": np.ones((4, 4), dtype=np.float32)})
        return save_checkpoint(state, tmp_path / "c.ckpt")

    def test_bad_magic_rejected(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(path)

    def test_extra_payload_rejected(self, tmp_path):
        path = self.make(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 4)
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(path)

    def test_mangled_manifest_rejected(self, tmp_path):
        path = self.make(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[10] = 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(path)


class TestLoadIntoModule:
    def test_shape_mismatch_names_offending_array(self, tmp_path):
        model = RecModel(num_users=6, num_items=11, d=8, d_proj=4)
        state = CheckpointState(arrays=module_arrays(model, "rec"))
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "m.ckpt"))
        wider = RecModel(num_users=6, num_items=11, d=16, d_proj=4)
        with pytest.raises(CheckpointError, match="rec.user_table.weight"):
            load_into_module(loaded, wider, "rec")

    def test_missing_array_reported(self, tmp_path):
        model = RecModel(num_users=3, num_items=5, d=4, d_proj=2)
        state = CheckpointState(arrays={})
        loaded = load_checkpoint(save_checkpoint(state, tmp_path / "e.ckpt"))
        with pytest.raises(CheckpointError, match="missing array"):
            load_into_module(loaded, model)
