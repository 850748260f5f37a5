import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from adaperceiver.errors import AllMaskedRow, GraphCycle, LabelOutOfRange, NonDeterministicF, ShapeMismatch
from adaperceiver.tensor import (
    Node,
    Tape,
    Tensor,
    add,
    backward,
    broadcast,
    concat,
    cross_entropy,
    finite_diff_check,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    mean,
    mul,
    precision,
    reshape,
    slice_,
    sum_,
    transpose,
    value_and_grad,
)


class TestMaskedSoftmax:
    def test_uniform_rows(self):
        out = masked_softmax(Tensor(np.zeros((2, 2))), np.ones((2, 2), bool))
        np.testing.assert_allclose(out.data, [[0.5, 0.5], [0.5, 0.5]])

    def test_hand_computed(self, high):
        out = masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([[1, 0], [1, 1]], bool)).data
        assert out[0].tolist() == [1.0, 0.0]
        np.testing.assert_allclose(out[1], [0.2689414213699951, 0.7310585786300049], atol=1e-12)

    def test_all_masked_row(self):
        with pytest.raises(AllMaskedRow):
            masked_softmax(Tensor(np.zeros((2, 2))), np.array([[1, 1], [0, 0]], bool))

    def test_mask_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            masked_softmax(Tensor(np.zeros((2, 3))), np.ones((2, 2), bool))

    def test_all_true_equals_unmasked(self, rng, high):
        s = Tensor(rng.normal(size=(3, 5, 5)) * 4)
        a = masked_softmax(s, np.ones((5, 5), bool)).data
        b = masked_softmax(s).data
        assert np.abs(a - b).max() <= 1e-7

    def test_large_scores_stable(self, high):
        out = masked_softmax(Tensor([[1000.0, 999.0, -1e4]]), np.array([[1, 1, 0]], bool)).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out[0, :2].sum(), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(
        scores=arrays(np.float64, (2, 4, 4), elements=st.floats(-30, 30)),
        mask=arrays(np.bool_, (4, 4)),
    )
    def test_against_oracle(self, scores, mask):
        mask = mask.copy()
        mask[:, 0] = True
        with precision("high"):
            out = masked_softmax(Tensor(scores), mask).data
        ref = oracles.masked_softmax(scores, mask)
        np.testing.assert_allclose(out, ref, atol=1e-12)
        assert (out[..., ~mask] == 0).all()
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_constant_input(self):
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0)

    def test_two_values(self, high):
        out = layer_norm(Tensor([0.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)

    def test_affine(self, high):
        out = layer_norm(Tensor([0.0, 2.0]), Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 3.0], atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(x=arrays(np.float64, (3, 7), elements=st.floats(-100, 100)))
    def test_moments(self, x):
        if np.ptp(x, axis=-1).min() < 1e-3:
            x = x + np.arange(7)
        with precision("high"):
            y = layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7))).data
        assert np.abs(y.mean(-1)).max() <= 1e-6
        assert np.abs(y.var(-1) - 1).max() <= 1e-5
        np.testing.assert_allclose(y, oracles.layer_norm(x, 1.0, 0.0), atol=1e-10)


class TestGelu:
    def test_against_formula(self, rng, high):
        x = rng.normal(size=50) * 3
        np.testing.assert_allclose(gelu(Tensor(x)).data, oracles.gelu(x), atol=1e-12)

    def test_float32_agrees_to_1e6(self, rng):
        x = (rng.normal(size=200) * 3).astype(np.float32)
        assert np.abs(gelu(Tensor(x)).data - oracles.gelu(x)).max() <= 1e-6


class TestCrossEntropy:
    def test_against_oracle(self, rng, high):
        z = rng.normal(size=(6, 10)) * 3
        y = rng.integers(0, 10, size=6)
        np.testing.assert_allclose(cross_entropy(Tensor(z), y).data, oracles.cross_entropy(z, y), atol=1e-12)

    def test_uniform_is_log_c(self, high):
        np.testing.assert_allclose(cross_entropy(Tensor(np.zeros((2, 7))), [0, 6]).data, np.log(7))

    @pytest.mark.parametrize("labels", [[-1, 0], [0, 5]])
    def test_label_range(self, labels):
        with pytest.raises(LabelOutOfRange):
            cross_entropy(Tensor(np.zeros((2, 5))), labels)

    def test_smoothing(self, high):
        z = np.array([[2.0, 0.0, 0.0]])
        logp = z - np.log(np.exp(z).sum())
        expected = -(0.9 * logp[0, 0] + 0.1 / 3 * logp.sum())
        np.testing.assert_allclose(cross_entropy(Tensor(z), [0], smoothing=0.1).data[0], expected, atol=1e-12)


class TestBackward:
    def test_sum(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = sum_(x)
        backward(loss, tape)
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_dot(self, high):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(mul(x, x))
        backward(loss, tape)
        assert x.grad.tolist() == [2.0, 4.0]

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = sum_(x)
        backward(loss, tape, leaves=[unused])
        assert unused.grad.shape == (2, 3) and not unused.grad.any()

    def test_grad_accumulates(self):
        x = Tensor(np.ones(2), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = sum_(x)
            backward(loss, tape)
        assert x.grad.tolist() == [2.0, 2.0]

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
        with pytest.raises(ShapeMismatch):
            backward(y, tape)

    def test_cycle_detected(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = mul(x, 2.0)
            loss = sum_(y)
        # corrupt the tape: the first node now consumes the last node's output
        first = tape.nodes[0]
        tape.nodes[0] = Node(first.op, (loss,), first.output, first.backward)
        with pytest.raises(GraphCycle):
            backward(loss, tape)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            pass
        mul(x, 2.0)
        assert len(tape) == 0

    def test_tape_order_is_topological(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            y = gelu(matmul(x, transpose(x)))
            sum_(y)
        produced = {id(n.output): i for i, n in enumerate(tape.nodes)}
        for i, n in enumerate(tape.nodes):
            assert all(produced.get(id(t), -1) < i for t in n.inputs)


PRIMITIVE_CASES = {
    "add_broadcast": lambda a, b: sum_(mul(add(a, b[0]), add(a, b[0]))),
    "mul": lambda a, b: sum_(mul(mul(a, a), b)),
    "matmul": lambda a, b: sum_(gelu(matmul(a, transpose(b)))),
    "softmax_masked": lambda a, b: sum_(mul(masked_softmax(matmul(a, transpose(b)), np.tril(np.ones((3, 3), bool))), matmul(a, transpose(b)))),
    "layer_norm": lambda a, b: sum_(mul(layer_norm(a, b[0], b[1]), a)),
    "slice_concat": lambda a, b: sum_(mul(concat([slice_(a, (slice(None), slice(0, 2))), b[:, :2]], axis=0), concat([a[:, 1:3], a[:, :2]], axis=0))),
    "broadcast_mean": lambda a, b: mean(mul(broadcast(b[0], (5, 4)), broadcast(b[0], (5, 4)))),
    "reshape_transpose": lambda a, b: sum_(mul(reshape(transpose(a), (2, 6)), reshape(a, (2, 6)))),
    "cross_entropy": lambda a, b: mean(cross_entropy(matmul(a, transpose(b)), [0, 2, 1])),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name, rng, high):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    f = PRIMITIVE_CASES[name]
    assert finite_diff_check(lambda: f(a, b), [a, b], eps=1e-5) <= 1e-6


class TestFiniteDiff:
    def test_quadratic_form(self, rng, high):
        m = rng.normal(size=(4, 4))
        a = Tensor(m @ m.T)
        x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        err = finite_diff_check(lambda: sum_(mul(x, matmul(a, x))), [x], eps=1e-5)
        assert err < 1e-6

    def test_constant(self, high):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert finite_diff_check(lambda: sum_(Tensor([3.0])), [x]) == 0.0

    def test_nondeterministic(self, high):
        x = Tensor([1.0], requires_grad=True)
        gen = np.random.default_rng(0)
        with pytest.raises(NonDeterministicF):
            finite_diff_check(lambda: add(sum_(x), float(gen.normal())), [x])

    def test_restores_params(self, rng, high):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        before = x.data.copy()
        finite_diff_check(lambda: sum_(mul(x, x)), [x])
        assert np.array_equal(before, x.data)

    def test_value_and_grad(self, high):
        x = Tensor([1.0, -3.0])
        v, (g,) = value_and_grad(lambda: sum_(mul(x, x)), [x])
        assert v == 10.0 and g.tolist() == [2.0, -6.0]


class TestPrecision:
    def test_modes(self):
        with precision("high"):
            assert Tensor([1]).dtype == np.float64
        with precision("standard"):
            assert Tensor([1]).dtype == np.float32

    def test_floating_input_keeps_dtype(self):
        with precision("standard"):
            assert Tensor(np.ones(2)).dtype == np.float64

    def test_unknown_mode(self):
        with pytest.raises(KeyError):
            with precision("half"):
                pass
