import math
import struct

import numpy as np
import pytest

from selfcon_lab.checkpoint import (MAGIC, CheckpointError, dump_params, load_checkpoint,
                                    restore_params, save_checkpoint)
from selfcon_lab.optim import Adam, LrSchedule, MissingGradError, Parameter, sgd_step


def _param(value, grad=None, name="w"):
    p = Parameter.from_array(name, np.array(value, dtype=float))
    if grad is not None:
        p.tensor.grad = np.array(grad, dtype=float)
    return p


class TestSgd:
    def test_plain_gradient_step(self):
        p = _param([1.0, 2.0], [0.5, -1.0])
        sgd_step([p], lr=1.0, momentum=0.0, weight_decay=0.0)
        np.testing.assert_array_equal(p.value, [0.5, 3.0])

    def test_grads_cleared(self):
        p = _param([1.0], [1.0])
        sgd_step([p], lr=0.1)
        assert p.grad is None

    def test_momentum_second_displacement(self):
        p = _param([0.0])
        disp = []
        for _ in range(2):
            before = p.value.copy()
            p.tensor.grad = np.array([1.0])
            sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
            disp.append(float(before[0] - p.value[0]))
        assert disp[1] == pytest.approx(1.9 * disp[0], rel=1e-12)

    def test_decay_only(self):
        p = _param([2.0, -4.0], [0.0, 0.0])
        sgd_step([p], lr=1.0, momentum=0.0, weight_decay=1e-4)
        np.testing.assert_allclose(p.value, np.array([2.0, -4.0]) * (1 - 1e-4), rtol=1e-15)

    def test_missing_grad_names_parameter_and_changes_nothing(self):
        a = _param([1.0], [1.0], name="a")
        b = _param([1.0], None, name="block.b")
        with pytest.raises(MissingGradError, match="block.b"):
            sgd_step([a, b], lr=1.0)
        assert a.value[0] == 1.0

    def test_buffer_shape_tracks_tensor(self):
        p = _param(np.ones((3, 2)), np.ones((3, 2)))
        sgd_step([p], lr=0.1)
        assert p.momentum_buffer.shape == p.shape


class TestAdam:
    def test_minimises_quadratic(self):
        p = _param([3.0, -2.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            p.tensor.grad = 2 * p.value
            opt.step()
        assert np.all(np.abs(p.value) < 1e-2)

    def test_missing_grad(self):
        with pytest.raises(MissingGradError):
            Adam([_param([1.0])]).step()


class TestSchedule:
    def test_cosine_values(self):
        s = LrSchedule(0.05, 50)
        assert s.lr(0) == 0.05
        assert s.lr(25) == pytest.approx(0.025, abs=1e-15)
        assert s.lr(10) == pytest.approx(0.05 * 0.5 * (1 + math.cos(math.pi * 10 / 50)))
        assert abs(s.lr(50)) <= 1e-12 * 0.05

    def test_constant(self):
        assert LrSchedule(0.3, 5, "constant").lr(4) == 0.3

    @pytest.mark.parametrize("args", [(0.0, 5), (0.1, 0), (0.1, 5, "step")])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            LrSchedule(*args)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        arrays = {"a.weight": rng.standard_normal((3, 4)), "a.bias": rng.standard_normal(4),
                  "tiny": np.array([5e-324, -0.0, np.pi]), "scalar": np.array(2.5)}
        save_checkpoint(tmp_path / "c.ckpt", arrays)
        back = load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"w": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "c.ckpt").read_bytes()
        expected = (MAGIC + struct.pack("<I", 1) + b"w" + struct.pack("<III", 2, 1, 2)
                    + struct.pack("<2d", 1.0, 2.0))
        assert raw == expected

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"NOPE00")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"w": np.ones(4)})
        raw = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_restore_into_params(self, tmp_path):
        src = [_param([1.0, 2.0], name="x"), _param([[3.0]], name="y")]
        save_checkpoint(tmp_path / "c.ckpt", dump_params(src))
        dst = [_param([0.0, 0.0], name="x"), _param([[0.0]], name="y")]
        restore_params(dst, load_checkpoint(tmp_path / "c.ckpt"))
        assert dst[0].value.tolist() == [1.0, 2.0] and dst[1].value[0, 0] == 3.0

    def test_restore_shape_mismatch(self):
        with pytest.raises(CheckpointError, match="shape"):
            restore_params([_param([0.0], name="x")], {"x": np.zeros(2)})

    def test_restore_missing(self):
        with pytest.raises(CheckpointError, match="missing"):
            restore_params([_param([0.0], name="x")], {})
