import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from adaperceiver.errors import MatDimOutOfRange
from adaperceiver.matryoshka import (
    MatLinearParams,
    WidthSpec,
    ffn,
    hidden_kept,
    mat_ffn,
    mat_linear,
    slice_for_inference,
)
from adaperceiver.tensor import Tape, Tensor, backward, precision, sum_


def _layer(rng, out_dim, in_dim, bias=True):
    return MatLinearParams(
        Tensor(rng.normal(size=(out_dim, in_dim)), requires_grad=True),
        Tensor(rng.normal(size=out_dim), requires_grad=True) if bias else None,
    )


def _reference_ffn(x, up, down, k):
    h = oracles.gelu(x @ up.weight.data[:k].T + up.bias.data[:k])
    return h @ down.weight.data[:, :k].T + down.bias.data


@pytest.mark.parametrize(
    "width,ratio,expected",
    [(64, 2.57, 164), (48, 2.57, 123), (32, 2.57, 82), (832, 2.57, 2138), (416, 2.57, 1069), (624, 2.57, 1604)],
)
def test_hidden_kept(width, ratio, expected):
    # floor(w * r + 0.5): 164.48, 123.36, 82.24, 2138.24, 1069.12, 1603.68
    assert hidden_kept(width, ratio) == expected
    assert WidthSpec(width, ratio).hidden == expected


class TestMatLinear:
    def test_full_dim_is_plain_linear(self, rng, high):
        p = _layer(rng, 3, 5)
        x = rng.normal(size=(2, 4, 5))
        for mat_input, dim in ((True, 5), (False, 3)):
            out = mat_linear(Tensor(x), p, dim, mat_input).data
            np.testing.assert_array_equal(out, x @ p.weight.data.T + p.bias.data)

    def test_masked_input(self, high):
        p = MatLinearParams(Tensor([[1.0, 1.0]]))
        out = mat_linear(Tensor([[[3.0, 5.0]]]), p, 1, mat_input=True)
        assert out.data.ravel().tolist() == [3.0]

    def test_masked_output_zeroes_bias(self, rng, high):
        p = _layer(rng, 2, 3)
        out = mat_linear(Tensor(rng.normal(size=(4, 1, 3)) * 100), p, 1, mat_input=False).data
        assert (out[..., 1] == 0).all()

    def test_per_sample(self, rng, high):
        p = _layer(rng, 6, 4)
        x = rng.normal(size=(3, 2, 4))
        dims = [2, 6, 4]
        out = mat_linear(Tensor(x), p, dims).data
        for i, k in enumerate(dims):
            single = mat_linear(Tensor(x[i : i + 1]), p, k).data
            np.testing.assert_array_equal(out[i : i + 1], single)

    @pytest.mark.parametrize("dim", [0, 7])
    def test_out_of_range(self, rng, dim):
        with pytest.raises(MatDimOutOfRange):
            mat_linear(Tensor(np.zeros((1, 1, 4))), _layer(rng, 6, 4), dim)


class TestMatFFN:
    def test_full_width_equals_ffn(self, rng, high):
        up, down = _layer(rng, 8, 3), _layer(rng, 3, 8)
        x = Tensor(rng.normal(size=(2, 5, 3)))
        np.testing.assert_array_equal(mat_ffn(x, up, down, 8).data, ffn(x, up, down).data)

    def test_small_slice_oracle(self, rng, high):
        up, down = _layer(rng, 4, 2), _layer(rng, 2, 4)
        x = rng.normal(size=(1, 3, 2))
        out = mat_ffn(Tensor(x), up, down, 2).data
        assert np.abs(out - _reference_ffn(x, up, down, 2)).max() <= 1e-6

    def test_mixed_widths(self, rng, high):
        up, down = _layer(rng, 10, 4), _layer(rng, 4, 10)
        x = rng.normal(size=(4, 3, 4))
        ks = [3, 10, 5, 3]
        out = mat_ffn(Tensor(x), up, down, ks).data
        for i, k in enumerate(ks):
            np.testing.assert_allclose(out[i], _reference_ffn(x[i], up, down, k), atol=1e-12)

    def test_gradient_sparsity(self, rng, high):
        up, down = _layer(rng, 10, 4), _layer(rng, 4, 10)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        with Tape() as tape:
            loss = sum_(mat_ffn(x, up, down, [4, 4]))
        backward(loss, tape)
        assert not up.weight.grad[4:].any() and not up.bias.grad[4:].any()
        assert not down.weight.grad[:, 4:].any()
        assert up.weight.grad[:4].any() and down.weight.grad[:, :4].any()


class TestSlicing:
    def test_full_width_identity(self, rng):
        up, down = _layer(rng, 6, 3), _layer(rng, 3, 6)
        su, sd = slice_for_inference(up, down, 6)
        assert su is up and sd is down

    def test_shapes(self, rng):
        up, down = _layer(rng, 6, 3), _layer(rng, 3, 6)
        su, sd = slice_for_inference(up, down, 2)
        assert su.weight.shape == (2, 3) and su.bias.shape == (2,) and sd.weight.shape == (3, 2)

    def test_invalid(self, rng):
        up, down = _layer(rng, 6, 3), _layer(rng, 3, 6)
        with pytest.raises(MatDimOutOfRange):
            slice_for_inference(up, down, 7)

    @settings(max_examples=25, deadline=None)
    @given(d=st.integers(1, 6), h=st.integers(1, 12), seed=st.integers(0, 2**16), data=st.data())
    def test_slice_equals_mask(self, d, h, seed, data):
        k = data.draw(st.integers(1, h))
        r = np.random.default_rng(seed)
        with precision("high"):
            up, down = _layer(r, h, d), _layer(r, d, h)
            x = Tensor(r.normal(size=(2, 3, d)))
            masked = mat_ffn(x, up, down, k).data
            su, sd = slice_for_inference(up, down, k)
            sliced = ffn(x, su, sd).data
        assert np.abs(masked - sliced).max() <= 1e-6

    def test_nesting(self, rng):
        up, down = _layer(rng, 9, 3), _layer(rng, 3, 9)
        small, _ = slice_for_inference(up, down, 4)
        big, big_down = slice_for_inference(up, down, 7)
        np.testing.assert_array_equal(small.weight.data, big.weight.data[:4])
        _, small_down = slice_for_inference(up, down, 4)
        np.testing.assert_array_equal(small_down.weight.data, big_down.weight.data[:, :4])
