import itertools

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from adaperceiver.costmodel import (
    PRESETS,
    STAGE_NAMES,
    early_exit_flops,
    flops_forward,
    preset_flops,
    readout_flops,
)
from adaperceiver.errors import InvalidConfig
from adaperceiver.model import ConfigTuple, ModelConfig

TOY = ModelConfig()
PAPER = ModelConfig.preset("paper")


def _poly(mc, t, w, l, n_in, n_out, include_head=True):
    a, b, c = oracles.flops_polynomial_in_t(mc, mc.hidden_for(w), l, n_in, n_out, include_head)
    return a * t * t + b * t + c


@pytest.mark.parametrize("mc", [TOY, PAPER], ids=["toy", "paper"])
@pytest.mark.parametrize("n_out,include_head", [(1, True), (1369, False), (7, True)])
def test_matches_hand_expansion(mc, n_out, include_head):
    for t, w, l in itertools.product((1, 7, mc.n_latents, 2 * mc.n_latents), mc.widths, (1, mc.depth)):
        report = flops_forward(ConfigTuple(t, w, l), mc, n_out, include_head=include_head)
        assert report.total == _poly(mc, t, w, l, mc.num_patches, n_out, include_head)


@pytest.mark.parametrize("x", [4, 16, 32, 128])
def test_doubling_t_difference(x):
    mc = PAPER
    f = lambda t: flops_forward(ConfigTuple(t, 832, 21), mc, 1369, include_head=False).total
    a, b, _ = oracles.flops_polynomial_in_t(mc, mc.hidden, 21, mc.num_patches, 1369, False)
    assert f(2 * x) - f(x) == a * 3 * x * x + b * x


def test_doubling_depth_doubles_blocks():
    one = flops_forward(ConfigTuple(16, 48, 3), TOY)
    two = flops_forward(ConfigTuple(16, 48, 6), TOY)
    assert two.block_subtotal == 2 * one.block_subtotal
    assert two.total - one.total == one.block_subtotal


def test_stage_layout():
    report = flops_forward(ConfigTuple(8, 32, 2), TOY)
    assert tuple(report.stages) == STAGE_NAMES
    assert report.total == sum(report.stages.values())
    assert report.as_row()["total"] == report.total
    assert "GFLOPs" in report.summary()


def test_monotone_over_grid():
    grid = {}
    for t in range(1, 33):
        for w in TOY.widths:
            for l in range(1, TOY.depth + 1):
                grid[t, w, l] = flops_forward(ConfigTuple(t, w, l), TOY).total
    for (t, w, l), v in grid.items():
        if t > 1:
            assert grid[t - 1, w, l] < v
        if l > 1:
            assert grid[t, w, l - 1] < v
        i = TOY.widths.index(w)
        if i:
            assert grid[t, TOY.widths[i - 1], l] < v


@settings(max_examples=50, deadline=None)
@given(t=st.integers(1, 64), l=st.integers(1, 6), r=st.integers(1, 6))
def test_early_exit_accounting(t, l, r):
    cfg = ConfigTuple(t, 64, l)
    base = flops_forward(cfg, TOY).total
    assert early_exit_flops(cfg, TOY, r) == base + (r - 1) * readout_flops(TOY, t)


def test_input_token_override():
    a = flops_forward(ConfigTuple(8, 64, 6), TOY, n_input_tokens=16).total
    b = flops_forward(ConfigTuple(8, 64, 6), TOY, n_input_tokens=32).total
    assert b > a


@pytest.mark.parametrize(
    "call",
    [
        lambda: flops_forward((8, 64, 6), TOY),
        lambda: flops_forward(ConfigTuple(0, 64, 6), TOY),
        lambda: flops_forward(ConfigTuple(8, 50, 6), TOY),
        lambda: flops_forward(ConfigTuple(8, 64, 7), TOY),
        lambda: flops_forward(ConfigTuple(8, 64, 6), TOY, 0),
        lambda: early_exit_flops(ConfigTuple(8, 64, 6), TOY, 0),
        lambda: preset_flops("imagenet"),
    ],
)
def test_invalid(call):
    with pytest.raises(InvalidConfig):
        call()


def test_presets_default_to_largest_config():
    assert set(PRESETS) >= {"paper-table2", "toy"}
    r = preset_flops("paper-table2")
    assert (r.config.t, r.config.w, r.config.l) == (256, 832, 21)
    assert r.n_output_tokens == 1369 and r.stages["head"] == 0
    assert r.n_input_tokens == 256


@pytest.mark.xfail(strict=True, reason="the closed-form count does not reach the published encoder totals; criterion 6 of the acceptance suite reports the gap")
@pytest.mark.parametrize("t,published", [(32, 73.0), (256, 158.0)])
def test_paper_table_totals(t, published):
    assert abs(preset_flops("paper-table2", t=t).gflops - published) <= 0.15 * published
