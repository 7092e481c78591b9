"""Adam contract and the binary checkpoint format."""

import numpy as np
import pytest

from mrtvqa import autodiff as ad
from mrtvqa.autodiff import Tensor
from mrtvqa.checkpoint import (
    CheckpointFormatError,
    load_checkpoint,
    load_module,
    load_sidecar,
    save_checkpoint,
    save_module,
)
from mrtvqa.layers import Linear
from mrtvqa.optim import Adam


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.ones(4), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(4)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_first_step_magnitude_near_lr(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal(64) * 5.0
        p = Tensor(np.zeros(64), requires_grad=True)
        opt = Adam([p], lr=3e-4)
        p.grad = g.copy()
        opt.step()
        step = -p.data
        np.testing.assert_allclose(np.sign(step), np.sign(g))
        np.testing.assert_allclose(np.abs(step), 3e-4, rtol=0.01)

    def test_three_steps_bit_identical_across_runs(self):
        def run():
            rng = np.random.default_rng(7)
            p = Tensor(rng.standard_normal(8).astype(np.float32), requires_grad=True)
            opt = Adam([p], lr=1e-3)
            traj = []
            for k in range(3):
                p.grad = (rng.standard_normal(8) * (k + 1)).astype(np.float32)
                opt.step()
                traj.append(p.data.tobytes())
            return traj

        assert run() == run()

    def test_shape_mismatch_is_state_error(self):
        p = Tensor(np.ones(4), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(5)
        with pytest.raises(RuntimeError, match="shape"):
            opt.step()

    def test_decoupled_weight_decay_shrinks_params(self):
        p = Tensor(np.full(3, 10.0), requires_grad=True)
        opt = Adam([p], lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(3)
        opt.step()
        np.testing.assert_allclose(p.data, 10.0 * (1 - 0.05))

    def test_invalid_lr_rejected(self):
        with pytest.raises(ValueError):
            Adam([], lr=0.0)


class TestCheckpointFormat:
    def test_round_trip_preserves_names_shapes_values(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = [
            ("enc.w", rng.standard_normal((3, 4)).astype(np.float32)),
            ("enc.b", rng.standard_normal(4).astype(np.float64)),
            ("scalar", np.asarray(3.25, dtype=np.float32)),
        ]
        path = tmp_path / "model.mrtc"
        save_checkpoint(path, arrays, sidecar={"k": 1})
        loaded = load_checkpoint(path)
        assert [n for n, _ in loaded] == [n for n, _ in arrays]
        for (_, a), (_, b) in zip(arrays, loaded):
            assert a.dtype == b.dtype
            np.testing.assert_array_equal(a, b)
        assert load_sidecar(path) == {"k": 1}

    def test_magic_bytes_present(self, tmp_path):
        path = tmp_path / "m.mrtc"
        save_checkpoint(path, [])
        assert path.read_bytes()[:4] == b"MRTC"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.mrtc"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected_with_offset(self, tmp_path):
        path = tmp_path / "m.mrtc"
        save_checkpoint(path, [("w", np.ones((4, 4), dtype=np.float32))])
        clipped = tmp_path / "c.mrtc"
        clipped.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointFormatError, match="offset"):
            load_checkpoint(clipped)

    def test_module_round_trip_including_buffers(self, tmp_path):
        from mrtvqa.layers import BatchNorm

        rng = np.random.default_rng(2)
        lin = Linear(3, 2, rng)
        bn = BatchNorm(2)
        bn.running_mean += 1.5

        class Holder(Linear):
            pass

        holder = lin
        holder.bn = bn
        path = tmp_path / "mod.mrtc"
        save_module(path, holder)
        lin2 = Linear(3, 2, np.random.default_rng(99))
        lin2.bn = BatchNorm(2)
        load_module(path, lin2)
        np.testing.assert_array_equal(lin2.w.data, lin.w.data)
        np.testing.assert_array_equal(lin2.bn.running_mean, bn.running_mean)

    def test_shape_mismatch_on_load(self, tmp_path):
        rng = np.random.default_rng(3)
        lin = Linear(3, 2, rng)
        path = tmp_path / "m.mrtc"
        save_module(path, lin)
        with pytest.raises(CheckpointFormatError, match="shape"):
            load_module(path, Linear(3, 5, rng))
