import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restune import tensor as T
from restune.tensor import (ContractError, DimensionError, NumericError, Tape, Tensor, backward,
                            finite_diff_grad, gradient_mismatch)


def _loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i, j in itertools.product(range(m), range(n)):
        s = 0.0
        for t in range(k):
            s += a[i, t] * b[t, j]
        out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_zero(self):
        out = T.matmul(Tensor([[1, 2]]), Tensor([[0], [0]]))
        np.testing.assert_array_equal(out.data, [[0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        out = T.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - _loop_matmul(a, b)).max() <= 1e-12

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform_row(self):
        out = T.row_softmax(Tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_no_overflow(self):
        out = T.row_softmax(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0] - 1.0) <= 1e-12 and abs(out[0, 1]) <= 1e-12

    def test_rows_against_direct_oracle(self):
        x = np.random.default_rng(1).normal(size=(2, 5))
        out = T.row_softmax(Tensor(x)).data
        direct = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        assert np.abs(out - direct).max() <= 1e-15
        assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            T.row_softmax(Tensor([[np.nan, 0.0]]))
        with pytest.raises(NumericError):
            T.row_logsumexp(Tensor([[np.inf, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=9), st.integers(1, 4))
    def test_rows_are_distributions(self, vals, rows):
        x = np.resize(np.array(vals), (rows, len(vals)))
        p = T.row_softmax(Tensor(x)).data
        assert np.all(p >= 0) and np.all(p <= 1)
        assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12


class TestElementwise:
    def test_sigmoid_zero_is_half(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
        assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5

    def test_add_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
        np.testing.assert_array_equal(T.elementwise("add", x, 0.0).data, x.data)

    def test_gelu_matches_high_precision_erf(self):
        mpmath.mp.dps = 40
        pts = [-6.0, -2.5, -1.0, -0.3, 0.0, 1e-4, 0.7, 1.9, 3.3, 8.0]
        out = T.gelu(Tensor(pts)).data
        ref = [float(mpmath.mpf(p) * (1 + mpmath.erf(mpmath.mpf(p) / mpmath.sqrt(2))) / 2) for p in pts]
        assert np.abs(out - np.array(ref)).max() <= 1e-10

    def test_bias_broadcast(self):
        x = Tensor(np.zeros((3, 2)))
        out = T.elementwise("bias", x, Tensor([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    @pytest.mark.parametrize("a,b", [((3, 2), (3,)), ((3, 2), (2, 2)), ((2, 3), (3, 1))])
    def test_unsupported_broadcast(self, a, b):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones(a)), Tensor(np.ones(b)))

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            T.elementwise("pow", Tensor(1.0), 2.0)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_unreachable_param_gets_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([3.0], requires_grad=True)
        backward(T.sum_all(x * x))
        assert p.grad is None

    def test_softmax_loss_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4)))
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        weights = Tensor(rng.normal(size=(3, 5)))

        def f(wt):
            return T.sum_all(T.row_softmax(T.matmul(x, wt)) * weights)

        backward(f(w))
        numeric = finite_diff_grad(f, w, 1e-5)
        rel = np.abs(w.grad - numeric) / np.maximum(np.abs(w.grad), 1e-300)
        assert rel[np.abs(w.grad) > 1e-6].max() < 1e-6

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_frozen_tensors_never_get_grads(self):
        rng = np.random.default_rng(5)
        frozen = [Tensor(rng.normal(size=(4, 4))) for _ in range(3)]
        p = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        h = p
        for w in frozen:
            h = T.gelu(T.matmul(h, w))
        backward(T.sum_all(T.row_softmax(h)))
        assert all(w.grad is None for w in frozen)
        assert p.grad is not None

    def test_replay_is_bitwise_deterministic(self):
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        loss = T.sum_all(T.row_logsumexp(T.gelu(T.matmul(x, w))))
        backward(loss)
        first = w.grad.copy()
        w.zero_grad()
        backward(loss)
        assert np.array_equal(first, w.grad)

    def test_accumulates_until_cleared(self):
        w = Tensor([2.0], requires_grad=True)
        loss = T.sum_all(w * w)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(w.grad, [8.0])


class TestTape:
    def test_topological_and_unique(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = T.matmul(a, a)
        c = T.gelu(b) + b
        loss = T.sum_all(T.vcat([c, b]))
        tape = Tape.from_output(loss)
        assert tape.is_topological()
        assert len({id(op) for op in tape.ops}) == len(tape.ops)
        assert len(tape) == 5

    def test_constant_ops_not_recorded(self):
        x = Tensor(np.ones((2, 2)))
        assert T.matmul(x, x).op is None


class TestFiniteDifferences:
    def test_square(self):
        g = finite_diff_grad(lambda t: T.sum_all(t * t), Tensor([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_constant(self):
        g = finite_diff_grad(lambda t: 3.0, Tensor([1.0, 2.0, 3.0]), 1e-5)
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ContractError):
            finite_diff_grad(lambda t: 0.0, Tensor([1.0]), 0.0)


def _unary(fn):
    return lambda ts: fn(ts[0])


OPS = {
    "matmul": (lambda ts: T.matmul(ts[0], ts[1]), [(3, 4), (4, 2)]),
    "transpose": (_unary(T.transpose), [(3, 2)]),
    "add": (lambda ts: ts[0] + ts[1], [(3, 2), (3, 2)]),
    "add_bias": (lambda ts: ts[0] + ts[1], [(3, 2), (2,)]),
    "sub_scalar": (lambda ts: ts[0] - ts[1], [(3, 2), (1,)]),
    "mul": (lambda ts: ts[0] * ts[1], [(3, 2), (3, 2)]),
    "mul_scalar": (lambda ts: ts[1] * ts[0], [(3, 2), (1,)]),
    "sigmoid": (_unary(T.sigmoid), [(3, 3)]),
    "gelu": (_unary(T.gelu), [(3, 3)]),
    "row_softmax": (_unary(T.row_softmax), [(3, 4)]),
    "row_logsumexp": (_unary(T.row_logsumexp), [(3, 4)]),
    "layer_norm": (lambda ts: T.layer_norm(ts[0], ts[1], ts[2]), [(3, 4), (4,), (4,)]),
    "col_slice": (lambda ts: T.col_slice(ts[0], 1, 3), [(2, 4)]),
    "row_slice": (lambda ts: T.row_slice(ts[0], 1, 2), [(3, 4)]),
    "vcat": (lambda ts: T.vcat([ts[0], ts[1]]), [(2, 3), (1, 3)]),
    "hcat": (lambda ts: T.hcat([ts[0], ts[1]]), [(2, 3), (2, 1)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_every_op_matches_finite_differences(name, seed):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    probe_shape = fn(inputs).shape
    weights = Tensor(rng.normal(size=probe_shape))

    def loss(ts):
        return T.sum_all(fn(ts) * weights)

    backward(loss(inputs))
    for i, t in enumerate(inputs):
        def f(v, i=i):
            args = list(inputs)
            args[i] = v
            return loss(args)

        numeric = finite_diff_grad(f, t, 1e-5)
        rel, ab = gradient_mismatch(t.grad, numeric)
        assert rel < 1e-4 and ab < 1e-6, (name, i, rel, ab)


def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)), requires_grad=True)
    assert np.prod(t.shape) == t.data.size
    backward(T.sum_all(t * 2.0))
    assert t.grad.shape == t.shape
