import math
import threading

import numpy as np
import pytest

from selfcon_lab import tensor as T
from selfcon_lab.tensor import GraphError, NormalizationError, ShapeError, Tensor

from conftest import central_diff, rel_err


def _grad_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    return [leaf.grad for leaf in leaves]


def _value_of(fn, *arrays):
    with T.no_grad():
        return fn(*[Tensor(a) for a in arrays]).item()


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_matches_finite_differences(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        ga, gb = _grad_of(lambda x, y: T.tsum(T.matmul(x, y)), a, b)
        f = lambda: _value_of(lambda x, y: T.tsum(T.matmul(x, y)), a, b)
        assert rel_err(ga, central_diff(f, a, 1e-5)) < 1e-6
        assert rel_err(gb, central_diff(f, b, 1e-5)) < 1e-6


class TestElementwise:
    def test_relu_negative_and_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        y = T.relu(x)
        T.tsum(y).backward()
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_log_sum_exp_values(self):
        assert T.log_sum_exp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
        big = T.log_sum_exp(Tensor([1000.0, 1000.0])).item()
        assert math.isfinite(big) and big == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_masked_log_sum_exp_ignores_masked(self):
        x = Tensor([[1.0, 50.0, 2.0]], requires_grad=True)
        out = T.log_sum_exp(x, axis=1, mask=np.array([[True, False, True]]))
        assert out.item() == pytest.approx(math.log(math.e + math.e**2))
        out.backward()
        assert x.grad[0, 1] == 0.0

    def test_l2_normalize(self):
        y = T.l2_normalize(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(y.data, [[0.6, 0.8]], atol=1e-15)

    def test_l2_normalize_zero_row(self):
        with pytest.raises(NormalizationError) as exc:
            T.l2_normalize(Tensor([[1.0, 0.0], [0.0, 0.0]]))
        assert exc.value.row == 1

    def test_inner_product(self):
        assert T.inner_product(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).item() == 11.0

    def test_cross_entropy_value(self):
        logits = Tensor([[0.0, 0.0], [0.0, math.log(3)]])
        ce = T.softmax_cross_entropy(logits, [0, 1]).item()
        assert ce == pytest.approx((math.log(2) + math.log(4 / 3)) / 2)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [2])


# every exported differentiable op, as a scalar function of its inputs
OPS = {
    "add": (lambda a, b: T.tsum(T.add(a, b) * T.add(a, b)), [(3, 2), (1, 2)]),
    "mul": (lambda a, b: T.tsum(T.mul(a, b)), [(3, 2), (3, 1)]),
    "relu": (lambda a: T.tsum(T.relu(a) * a), [(4, 3)]),
    "exp": (lambda a: T.tsum(T.exp(a)), [(3, 3)]),
    "log": (lambda a: T.tsum(T.log(T.exp(a) + 1.0)), [(3, 3)]),
    "matmul": (lambda a, b: T.tsum(T.relu(T.matmul(a, b))), [(2, 3), (3, 4)]),
    "transpose": (lambda a: T.tsum(T.matmul(a, T.transpose(a))), [(3, 2)]),
    "reshape": (lambda a: T.tsum(T.reshape(a, (6,)) * np.arange(6.0)), [(2, 3)]),
    "mean": (lambda a: T.mean(a * a, axis=0).sum(), [(4, 2)]),
    "l2_normalize": (lambda a: T.tsum(T.l2_normalize(a) * np.arange(6.0).reshape(2, 3)), [(2, 3)]),
    "inner_product": (lambda a, b: T.inner_product(a, b) * T.inner_product(a, a), [(5,), (5,)]),
    "log_sum_exp": (lambda a: T.tsum(T.log_sum_exp(a, axis=1)), [(3, 4)]),
    "softmax_cross_entropy": (lambda a: T.softmax_cross_entropy(a, [0, 2, 1]), [(3, 3)]),
    "take_rows": (lambda a: T.tsum(T.take_rows(a, [0, 2, 0]) * T.take_rows(a, [1, 1, 2])), [(3, 2)]),
    "concat": (lambda a, b: T.tsum(T.exp(T.concat([a, b]))), [(2, 2), (1, 2)]),
}


class TestGradcheck:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_against_central_differences(self, name):
        fn, shapes = OPS[name]
        for seed in range(100):
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal(s) for s in shapes]
            if name == "relu":  # keep clear of the kink
                arrays[0] += np.sign(arrays[0]) * 0.1
            grads = _grad_of(fn, *arrays)
            for arr, g in zip(arrays, grads):
                num = central_diff(lambda: _value_of(fn, *arrays), arr)
                assert rel_err(g, num) < 1e-4, (name, seed)


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_root_grad_is_one(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(x * x)
        y.backward()
        assert y.grad == 1.0

    def test_shared_parameter_sums_paths(self):
        w = Tensor([[2.0]], requires_grad=True)
        x = Tensor([[3.0]])
        a = T.matmul(x, w)
        b = T.matmul(T.matmul(x, w), w)
        T.tsum(a + b).backward()
        # d/dw (3w + 3w^2) = 3 + 6w
        assert w.grad[0, 0] == pytest.approx(15.0)

    def test_non_scalar_root(self):
        with pytest.raises(GraphError):
            (Tensor([1.0, 2.0], requires_grad=True) * 2.0).backward()

    def test_constants_get_no_grad(self):
        c = Tensor([1.0, 2.0])
        x = Tensor([3.0, 4.0], requires_grad=True)
        T.tsum(c * x).backward()
        assert c.grad is None

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        seen = []
        with T.no_grad():
            t = threading.Thread(target=lambda: seen.append(T.is_grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            T.tsum(T.log_sum_exp(T.matmul(a, T.transpose(a)), axis=1)).backward()
            return a.grad

        np.testing.assert_array_equal(run(), run())
