import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from adaperceiver.attention import (
    AttentionParams,
    RopeParams,
    block_masked_attention,
    create_block_mask,
    cross_attention,
    rope_rotate,
)
from adaperceiver.errors import EmptyGranularities, NonMonotoneGranularities, OddHeadDim, ShapeMismatch
from adaperceiver.tensor import Tensor, precision


def _params(rng, dim, heads, std=0.3):
    with precision("high"):
        return AttentionParams.init(dim, heads, rng, std=std, dtype=np.float64)


def _with_bias(p, rng):
    for name in ("bq", "bk", "bv", "bo"):
        getattr(p, name).data[...] = rng.normal(size=p.dim) * 0.1
    return p


def _as_dict(p):
    return {k: v.data for k, v in p.tensors().items()}


class TestRope:
    def test_position_zero_is_identity(self, rng, high):
        x = rng.normal(size=(1, 8))
        out = rope_rotate(Tensor(x), [0], RopeParams(8)).data
        assert np.array_equal(out, x)

    def test_single_pair(self, high):
        out = rope_rotate(Tensor([[0.0, 0.0], [1.0, 0.0]]), [0, 1], RopeParams(2, theta=123.0)).data
        np.testing.assert_allclose(out[1], [math.cos(1), math.sin(1)], atol=1e-15)

    def test_matches_complex_oracle(self, rng, high):
        x = rng.normal(size=(2, 3, 6, 8))
        pos = [0, 3, 4, 7, 11, 20]
        out = rope_rotate(Tensor(x), pos, RopeParams(8, 500.0)).data
        np.testing.assert_allclose(out, oracles.rope(x, pos, 500.0), atol=1e-12)

    def test_pair_norms_preserved(self, rng, high):
        x = rng.normal(size=(5, 16))
        out = rope_rotate(Tensor(x), range(5), RopeParams(16)).data
        n_in = np.hypot(x[:, 0::2], x[:, 1::2])
        n_out = np.hypot(out[:, 0::2], out[:, 1::2])
        assert np.abs(n_in - n_out).max() <= 1e-7

    @settings(max_examples=30, deadline=None)
    @given(m=st.integers(0, 50), n=st.integers(0, 50), s=st.integers(0, 50), seed=st.integers(0, 2**16))
    def test_relative_position_identity(self, m, n, s, seed):
        r = np.random.default_rng(seed)
        q, k = r.normal(size=(1, 8)), r.normal(size=(1, 8))
        p = RopeParams(8)
        with precision("high"):
            a = rope_rotate(Tensor(q), [m], p).data @ rope_rotate(Tensor(k), [n], p).data.T
            b = rope_rotate(Tensor(q), [m + s], p).data @ rope_rotate(Tensor(k), [n + s], p).data.T
        assert abs(a - b).max() <= 1e-5

    def test_odd_head_dim(self):
        with pytest.raises(OddHeadDim):
            RopeParams(3)
        with pytest.raises(OddHeadDim):
            rope_rotate(Tensor(np.zeros((1, 3))), [0], RopeParams(4))

    def test_negative_position(self):
        with pytest.raises(ValueError):
            rope_rotate(Tensor(np.zeros((1, 2))), [-1], RopeParams(2))


class TestBlockMask:
    def test_two_granularities(self):
        expected = [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 1]]
        assert create_block_mask([2, 4]).allow.astype(int).tolist() == expected

    def test_single_granularity_is_full(self):
        assert create_block_mask([5]).allow.all()

    def test_unit_steps_are_causal(self):
        assert create_block_mask([1, 2, 3]).allow.astype(int).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]

    @pytest.mark.parametrize("grans", [(1,), (2, 4), (4, 8, 16, 32), (3, 5, 6, 11), (1, 2, 3, 7, 20)])
    def test_against_group_definition(self, grans):
        mask = create_block_mask(grans)
        np.testing.assert_array_equal(mask.allow, oracles.block_mask(grans))
        for t in grans:
            # rows before t never see columns at or after t
            assert not mask.allow[:t, t:].any()

    def test_restrict(self):
        mask = create_block_mask([4, 8, 16])
        assert mask.restrict(8).granularities == (4, 8)
        assert mask.restrict(6).granularities == (4, 6)
        assert mask.restrict(20).granularities == (4, 8, 16, 20)
        np.testing.assert_array_equal(mask.restrict(8).allow, mask.allow[:8, :8])

    @pytest.mark.parametrize("bad,err", [([], EmptyGranularities), ([2, 2], NonMonotoneGranularities), ([0, 2], NonMonotoneGranularities), ([4, 2], NonMonotoneGranularities)])
    def test_invalid(self, bad, err):
        with pytest.raises(err):
            create_block_mask(bad)


class TestBlockMaskedAttention:
    def test_identity_projection_reduces_to_softmax_attention(self, rng, high):
        d = 4
        p = _params(rng, d, 1)
        for name in ("wq", "wk", "wv", "wo"):
            getattr(p, name).data[...] = np.eye(d)
        x = rng.normal(size=(1, 3, d))
        # position-free check via the oracle with RoPE on both sides
        out = block_masked_attention(Tensor(x), np.ones((3, 3), bool), p, RopeParams(d)).data
        q = oracles.rope(x[0], range(3))
        s = q @ q.T / 2.0
        ref = oracles.masked_softmax(s) @ x[0]
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_against_oracle(self, rng, high, heads):
        p = _with_bias(_params(rng, 8, heads), rng)
        x = rng.normal(size=(2, 6, 8))
        mask = create_block_mask([2, 3, 6])
        out = block_masked_attention(Tensor(x), mask, p, RopeParams(8 // heads)).data
        ref = oracles.mha(x, x, _as_dict(p), heads, mask.allow, True, True)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("grans", [(2, 4), (4, 8, 16), (1, 3, 8)])
    def test_truncation_equivalence(self, rng, high, grans):
        p = _with_bias(_params(rng, 8, 2), rng)
        n = grans[-1]
        x = rng.normal(size=(2, n, 8))
        full_mask = create_block_mask(grans)
        full = block_masked_attention(Tensor(x), full_mask, p, RopeParams(4)).data
        for t in grans:
            part = block_masked_attention(Tensor(x[:, :t]), full_mask.restrict(t), p, RopeParams(4)).data
            assert np.abs(full[:, :t] - part).max() <= 1e-5

    def test_later_tokens_do_not_leak(self, rng, high):
        p = _params(rng, 8, 2)
        x = rng.normal(size=(1, 4, 8))
        mask = create_block_mask([2, 4])
        a = block_masked_attention(Tensor(x), mask, p, RopeParams(4)).data
        b = block_masked_attention(Tensor(x[:, [0, 1, 3, 2]]), mask, p, RopeParams(4)).data
        np.testing.assert_array_equal(a[:, :2], b[:, :2])

    def test_shape_errors(self, rng):
        p = _params(rng, 8, 2)
        with pytest.raises(ShapeMismatch):
            block_masked_attention(Tensor(np.zeros((1, 4, 8))), create_block_mask([2, 3]), p, RopeParams(4))
        with pytest.raises(ShapeMismatch):
            block_masked_attention(Tensor(np.zeros((1, 4, 6))), None, p, RopeParams(4))

    def test_indivisible_heads(self, rng):
        with pytest.raises(ShapeMismatch):
            _params(rng, 6, 4)


class TestCrossAttention:
    def test_single_source_token(self, rng, high):
        p = _with_bias(_params(rng, 4, 2), rng)
        sink = rng.normal(size=(2, 3, 4))
        src = rng.normal(size=(2, 1, 4))
        out = cross_attention(Tensor(sink), Tensor(src), p).data
        v = src @ p.wv.data.T + p.bv.data
        expected = sink + (v @ p.wo.data.T + p.bo.data)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identical_source_tokens(self, rng, high):
        p = _with_bias(_params(rng, 4, 2), rng)
        sink = rng.normal(size=(1, 3, 4))
        src = np.repeat(rng.normal(size=(1, 1, 4)), 5, axis=1)
        out = cross_attention(Tensor(sink), Tensor(src), p, rope_sink=RopeParams(2)).data
        v = src[:, :1] @ p.wv.data.T + p.bv.data
        np.testing.assert_allclose(out, sink + v @ p.wo.data.T + p.bo.data, atol=1e-12)

    def test_slicing_equals_source_masking(self, rng, high):
        p = _with_bias(_params(rng, 8, 2), rng)
        sink = rng.normal(size=(2, 1, 8))
        src = rng.normal(size=(2, 7, 8))
        for t in (1, 3, 7):
            a = cross_attention(Tensor(sink), Tensor(src[:, :t]), p).data
            b = cross_attention(Tensor(sink), Tensor(src), p, source_mask=np.arange(7) < t).data
            assert np.abs(a - b).max() <= 1e-5

    def test_rope_on_sink_only(self, rng, high):
        p = _with_bias(_params(rng, 8, 2), rng)
        sink, src = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 5, 8))
        out = cross_attention(Tensor(sink), Tensor(src), p, rope_sink=RopeParams(4)).data
        ref = sink + oracles.mha(sink, src, _as_dict(p), 2, rope_q=True)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_empty_source(self, rng):
        p = _params(rng, 4, 2)
        with pytest.raises(ShapeMismatch):
            cross_attention(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 0, 4))), p)

    def test_batch_mismatch(self, rng):
        p = _params(rng, 4, 2)
        with pytest.raises(ShapeMismatch):
            cross_attention(Tensor(np.zeros((2, 1, 4))), Tensor(np.zeros((1, 2, 4))), p)
