"""Closed-form forward FLOPs per sub-network.

One multiply-accumulate counts as 2 FLOPs. Elementwise work is charged with
the per-element constants below; they are conventions, not measurements.
Counts are per input sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidConfig
from .model import ConfigTuple, ModelConfig

MAC = 2
LAYERNORM_PER_ELEM = 5  # centre, square, scale by rstd, gain, bias
SOFTMAX_PER_ELEM = 5  # max, subtract, exp, sum, divide
GELU_PER_ELEM = 8  # tanh approximation
ROPE_PER_ELEM = 3  # x*cos + swap(x)*sin
ADD_PER_ELEM = 1  # residual add, bias add, layer-scale multiply

STAGE_NAMES = ("patch_embed", "embed_ffn", "encode", "attention", "ffn", "readout", "head")


@dataclass
class FlopsReport:
    config: ConfigTuple
    n_input_tokens: int
    n_output_tokens: int
    hidden: int
    per_block_attention: int
    per_block_ffn: int
    stages: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    @property
    def block_subtotal(self) -> int:
        return self.stages["attention"] + self.stages["ffn"]

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def as_row(self) -> dict:
        row = {"t": self.config.t, "w": self.config.w, "l": self.config.l}
        row.update(self.stages)
        row["total"] = self.total
        return row

    def summary(self) -> str:
        lines = [f"config {self.config.label()}  inputs {self.n_input_tokens}  outputs {self.n_output_tokens}  hidden {self.hidden}"]
        for name, value in self.stages.items():
            lines.append(f"  {name:<12} {value:>16,d}")
        lines.append(f"  {'total':<12} {self.total:>16,d}  ({self.gflops:.3f} GFLOPs)")
        return "\n".join(lines)


def _linear(n: int, d_in: int, d_out: int, bias: bool = True) -> int:
    return MAC * n * d_in * d_out + (ADD_PER_ELEM * n * d_out if bias else 0)


def _attention_core(n_q: int, n_kv: int, d: int, heads: int) -> int:
    """Scores, masked softmax and the value mix; projections excluded."""
    return MAC * n_q * n_kv * d + SOFTMAX_PER_ELEM * heads * n_q * n_kv + MAC * n_q * n_kv * d


def patch_embed_flops(mc: ModelConfig, n_in: int) -> int:
    return _linear(n_in, mc.patch_dim, mc.dim)


def ffn_flops(n: int, d: int, hidden: int) -> int:
    return _linear(n, d, hidden) + GELU_PER_ELEM * n * hidden + _linear(n, hidden, d)


def embed_ffn_flops(mc: ModelConfig, n_in: int) -> int:
    if not mc.embed_ffn:
        return 0
    d = mc.dim
    return LAYERNORM_PER_ELEM * n_in * d + ffn_flops(n_in, d, mc.hidden) + ADD_PER_ELEM * n_in * d


def encode_flops(mc: ModelConfig, t: int, n_in: int) -> int:
    d = mc.dim
    norms = LAYERNORM_PER_ELEM * (t + n_in) * d
    proj = _linear(t, d, d) + 2 * _linear(n_in, d, d) + _linear(t, d, d)
    rope = ROPE_PER_ELEM * t * d
    return norms + proj + rope + _attention_core(t, n_in, d, mc.heads) + ADD_PER_ELEM * t * d


def block_attention_flops(mc: ModelConfig, t: int) -> int:
    d = mc.dim
    proj = 4 * _linear(t, d, d)
    rope = 2 * ROPE_PER_ELEM * t * d
    scale_and_residual = 2 * ADD_PER_ELEM * t * d
    return LAYERNORM_PER_ELEM * t * d + proj + rope + _attention_core(t, t, d, mc.heads) + scale_and_residual


def block_ffn_flops(mc: ModelConfig, t: int, hidden: int) -> int:
    d = mc.dim
    return LAYERNORM_PER_ELEM * t * d + ffn_flops(t, d, hidden) + 2 * ADD_PER_ELEM * t * d


def readout_attention_flops(mc: ModelConfig, t: int, n_out: int) -> int:
    d = mc.dim
    norms = LAYERNORM_PER_ELEM * (n_out + t) * d
    proj = _linear(n_out, d, d) + 2 * _linear(t, d, d) + _linear(n_out, d, d)
    return norms + proj + _attention_core(n_out, t, d, mc.heads) + ADD_PER_ELEM * n_out * d


def head_flops(mc: ModelConfig, n_out: int) -> int:
    return LAYERNORM_PER_ELEM * n_out * mc.dim + _linear(n_out, mc.dim, mc.num_classes)


def readout_flops(mc: ModelConfig, t: int, n_output_tokens: int = 1, include_head: bool = True) -> int:
    """Cost of one readout (cross-attention plus head) from ``t`` latents."""
    extra = head_flops(mc, n_output_tokens) if include_head else 0
    return readout_attention_flops(mc, t, n_output_tokens) + extra


def flops_forward(
    cfg: ConfigTuple,
    model_cfg: ModelConfig,
    n_output_tokens: int = 1,
    n_input_tokens: int | None = None,
    include_head: bool = True,
) -> FlopsReport:
    """Forward FLOPs of sub-network ``cfg`` with a single readout at depth ``cfg.l``."""
    if not isinstance(cfg, ConfigTuple):
        raise InvalidConfig(f"expected a ConfigTuple, got {type(cfg).__name__}")
    cfg.validate(model_cfg)
    if n_output_tokens < 1:
        raise InvalidConfig("n_output_tokens must be >= 1")
    n_in = model_cfg.num_patches if n_input_tokens is None else int(n_input_tokens)
    if n_in < 1:
        raise InvalidConfig("n_input_tokens must be >= 1")
    hidden = model_cfg.hidden_for(cfg.w)
    attn = block_attention_flops(model_cfg, cfg.t)
    ff = block_ffn_flops(model_cfg, cfg.t, hidden)
    stages = {
        "patch_embed": patch_embed_flops(model_cfg, n_in),
        "embed_ffn": embed_ffn_flops(model_cfg, n_in),
        "encode": encode_flops(model_cfg, cfg.t, n_in),
        "attention": cfg.l * attn,
        "ffn": cfg.l * ff,
        "readout": readout_attention_flops(model_cfg, cfg.t, n_output_tokens),
        "head": head_flops(model_cfg, n_output_tokens) if include_head else 0,
    }
    return FlopsReport(cfg, n_in, n_output_tokens, hidden, attn, ff, stages)


def early_exit_flops(cfg: ConfigTuple, model_cfg: ModelConfig, readouts: int, n_output_tokens: int = 1) -> int:
    """Blocks up to ``cfg.l`` plus ``readouts`` readouts, each charged in full."""
    if readouts < 1:
        raise InvalidConfig("an early-exit run performs at least one readout")
    base = flops_forward(cfg, model_cfg, n_output_tokens).total
    return base + (readouts - 1) * readout_flops(model_cfg, cfg.t, n_output_tokens)


PRESETS = {
    # Segmentation-scale encoder: 256 input patches, 1369 output tokens, no class head.
    "paper-table2": {"model": "paper", "n_output_tokens": 1369, "include_head": False},
    "toy": {"model": "toy", "n_output_tokens": 1, "include_head": True},
}


def preset_flops(name: str, t: int | None = None, w: int | None = None, l: int | None = None) -> FlopsReport:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown flops preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    mc = ModelConfig.preset(spec["model"])
    cfg = ConfigTuple(
        max(mc.token_grans) if t is None else t,
        max(mc.widths) if w is None else w,
        mc.depth if l is None else l,
    )
    return flops_forward(cfg, mc, spec["n_output_tokens"], include_head=spec["include_head"])
