import numpy as np
import pytest

from hybridseg import tensor as T
from hybridseg.tensor import (
    FormatError,
    NonFiniteError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    concat,
    elementwise,
    grad_check,
    matmul,
    record,
    reduce,
    softmax,
)


def matmul_oracle(a, b):
    """Triple-loop matrix product, independent of numpy matmul."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f w.r.t. a raw array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = f()
        flat[j] = orig - eps
        fm = f()
        flat[j] = orig
        gf[j] = (fp - fm) / (2 * eps)
    return g


class TestElementwise:
    def test_relu_definition(self):
        out = elementwise("relu", Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        out = elementwise("sigmoid", Tensor([0.0]))
        assert np.allclose(out.data, [0.5])

    def test_add(self):
        out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_broadcast_extent_one(self):
        out = Tensor(np.ones((2, 3))) + Tensor(np.full((2, 1), 2.0))
        assert out.shape == (2, 3)
        assert np.all(out.data == 3.0)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_nonfinite_result(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0]) / Tensor([0.0])

    def test_nonfinite_construction(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise("pow", Tensor([1.0]), Tensor([2.0]))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_small_product(self):
        out = matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [3.0]]))
        assert np.array_equal(out.data, [[2.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5))
        out = matmul(Tensor(a), Tensor(b))
        assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-12)

    def test_batched(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        out = matmul(Tensor(a), Tensor(b))
        for i in range(2):
            assert np.allclose(out.data[i], matmul_oracle(a[i], b[i]), atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConcat:
    def test_columns(self):
        out = concat([Tensor([[1.0], [2.0]]), Tensor([[3.0], [4.0]])], axis=1)
        assert np.array_equal(out.data, [[1.0, 3.0], [2.0, 4.0]])

    def test_extent_addition(self):
        a = Tensor(np.zeros((2, 3, 8, 8)))
        b = Tensor(np.zeros((2, 5, 8, 8)))
        assert concat([a, b], axis=1).shape == (2, 8, 8, 8)

    def test_empty_list(self):
        with pytest.raises(ShapeError):
            concat([], axis=0)

    def test_off_axis_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_concat_then_slice_identity(self):
        rng = np.random.default_rng(12)
        for axis, shapes in [
            (0, [(2, 3), (4, 3), (1, 3)]),
            (1, [(2, 1, 5), (2, 4, 5), (2, 2, 5)]),
            (2, [(1, 2, 3), (1, 2, 2)]),
        ]:
            parts = [Tensor(rng.standard_normal(s)) for s in shapes]
            cat = concat(parts, axis=axis)
            offset = 0
            for part in parts:
                size = part.shape[axis]
                back = T.narrow(cat, axis, offset, size)
                assert np.array_equal(back.data, part.data)
                offset += size

    def test_split_gradient_round_trip(self):
        # gradient through concat-then-slice is the identity on each input
        rng = np.random.default_rng(5)
        a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        with record():
            cat = concat([a, b], axis=1)
            loss = T.tsum(cat * cat)
            backward(loss)
        assert np.allclose(a.grad, 2 * a.data, atol=1e-12)
        assert np.allclose(b.grad, 2 * b.data, atol=1e-12)


class TestReduce:
    def test_sum_all(self):
        out = reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert out.item() == 10.0

    def test_mean(self):
        assert reduce("mean", Tensor([2.0, 4.0])).item() == 3.0

    def test_max_routes_single_argmax(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal(7), requires_grad=True)
        with record():
            out = reduce("max", x)
            backward(out)
        assert x.grad.sum() == 1.0
        assert np.count_nonzero(x.grad) == 1
        assert x.grad[np.argmax(x.data)] == 1.0

        def f():
            return float(np.max(x.data))

        assert np.allclose(x.grad, fd_grad(f, x.data), atol=1e-6)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            reduce("sum", Tensor([1.0, 2.0]), axes=[3])


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_shift_invariance_no_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5])

    def test_sums_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax(Tensor(rng.standard_normal(5)), axis=0)
        assert abs(out.data.sum() - 1.0) <= 1e-12
        assert np.all(out.data > 0) and np.all(out.data < 1)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with record():
            leaves = backward(T.tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))
        assert leaves[x] is x.grad

    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        with record():
            backward(T.tsum(x * x))
        assert np.allclose(x.grad, [6.0])

    def test_nonscalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with record():
            y = x * x
            with pytest.raises(ShapeError):
                backward(y)

    def test_detached_root(self):
        x = Tensor([1.0], requires_grad=True)
        with record():
            with pytest.raises(TapeError):
                backward(x)

    def test_tape_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        with record():
            loss = T.tsum(x * x)
            backward(loss)
            with pytest.raises(TapeError):
                x * x

    def test_nested_tape_rejected(self):
        with record():
            with pytest.raises(TapeError):
                with record():
                    pass

    def test_reused_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with record():
            y = x * x  # reused below
            backward(T.tsum(y + y))
        assert np.allclose(x.grad, [8.0])

    def test_bitwise_reproducible(self):
        rng = np.random.default_rng(17)
        data = rng.standard_normal((4, 4))
        grads = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            with record():
                y = T.tanh(x * x - x)
                backward(T.tsum(y * y))
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])


class TestGradCheck:
    def test_linear_is_exact(self):
        x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
        res = grad_check(lambda t: T.tsum(t), [x], eps=1e-5)
        assert res.max_rel_error <= 1e-10
        assert res.kink_events == 0

    def test_sigmoid_chain(self):
        x = Tensor(
            np.random.default_rng(1).uniform(-2, 2, size=8), requires_grad=True
        )
        res = grad_check(lambda t: T.tsum(T.sigmoid(t)), [x], eps=1e-5)
        assert res.max_rel_error <= 1e-6

    def test_relu_kink_flagged(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        res = grad_check(lambda t: T.tsum(T.relu(t)), [x], eps=1e-5)
        assert res.kink_events >= 1

    def test_relu_away_from_kink(self):
        x = Tensor([-1.5, 0.7, 2.0], requires_grad=True)
        res = grad_check(lambda t: T.tsum(T.relu(t)), [x], eps=1e-5)
        assert res.kink_events == 0
        assert res.max_rel_error <= 1e-8

    def test_composite_graph(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)

        def f(a_, b_):
            h = T.tanh(matmul(a_, b_))
            return T.tsum(T.sigmoid(h) * h)

        res = grad_check(f, [a, b], eps=1e-5)
        assert res.max_rel_error <= 1e-6

    def test_eps_validated(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda t: T.tsum(t), [x], eps=0.5)

    def test_nondeterministic_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        state = {"n": 0.0}

        def f(t):
            state["n"] += 1.0
            return T.tsum(t * Tensor([state["n"]]))

        with pytest.raises(ValueError):
            grad_check(f, [x], eps=1e-5)

    def test_sampled_subset(self):
        x = Tensor(
            np.random.default_rng(4).uniform(-1, 1, 50), requires_grad=True
        )
        res = grad_check(lambda t: T.tsum(T.tanh(t)), [x], eps=1e-5, max_elements=10)
        assert res.elements_checked == 10
        assert res.max_rel_error <= 1e-6


class TestStructuralGradients:
    def test_ops_against_finite_differences(self):
        rng = np.random.default_rng(9)
        weights = Tensor(rng.standard_normal((4, 4)))
        cases = {
            "narrow": lambda t: T.tsum(T.narrow(t, 1, 1, 2) * 3.0),
            "reshape": lambda t: T.tsum(T.reshape(t, (8, 2)) * T.reshape(t, (8, 2))),
            "transpose": lambda t: T.tsum(T.transpose(t, (1, 0)) * 2.0),
            "pad2d": lambda t: T.tsum(
                T.pad2d(T.reshape(t, (1, 1, 4, 4)), (1, 2, 0, 1))
                * T.pad2d(T.reshape(t, (1, 1, 4, 4)), (1, 2, 0, 1))
            ),
            "roll2d": lambda t: T.tsum(
                T.roll2d(T.reshape(t, (1, 1, 4, 4)), (1, -2)) * 1.7
            ),
            "softmax": lambda t: T.tsum(softmax(t, axis=1) * weights),
            "mean": lambda t: T.tmean(t * t),
            "div": lambda t: T.tsum(t / (t * t + 2.0)),
        }
        for name, f in cases.items():
            x = Tensor(rng.uniform(-2, 2, (4, 4)), requires_grad=True)
            res = grad_check(f, [x], eps=1e-5)
            assert res.max_rel_error <= 1e-6, name


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(21)
        t = Tensor(rng.standard_normal((2, 3, 4)))
        buf = T.tensor_to_bytes(t)
        assert buf[:4] == b"TBCL"
        back, end = T.tensor_from_bytes(buf)
        assert end == len(buf)
        assert back.shape == t.shape
        assert np.array_equal(back.data, t.data)

    def test_file_round_trip(self, tmp_path):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        path = tmp_path / "t.bin"
        T.save_tensor(t, path)
        assert np.array_equal(T.load_tensor(path).data, t.data)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            T.tensor_from_bytes(b"XXXX" + b"\x00" * 32)

    def test_truncated(self):
        buf = T.tensor_to_bytes(Tensor(np.ones((4, 4))))
        with pytest.raises(FormatError):
            T.tensor_from_bytes(buf[:-8])
