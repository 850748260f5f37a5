"""The adaptive Perceiver: patch embedding, latent encode, masked blocks, readout.

Two execution paths share one parameter set:

* :meth:`AdaPerceiver.forward_training` runs the encoder once at the full
  latent count with the block mask and per-sample width masks, then reads out
  every token granularity from the last latents and one sampled granularity
  from each supervised depth.
* :meth:`AdaPerceiver.forward_config` runs a single ``(t, w, l)`` sub-network
  with ``t`` latents, sliced FFN weights and ``l`` blocks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    AttentionParams,
    BlockMask,
    RopeParams,
    attend,
    block_masked_attention,
    create_block_mask,
    linear,
    trunc_normal,
)
from .errors import BadImageShape, InvalidConfig
from .matryoshka import MatLinearParams, ffn, hidden_kept, mat_ffn, slice_for_inference
from .tensor import Tensor, add, broadcast, default_dtype, layer_norm, mul, slice_

CHECKPOINT_FORMAT = "adaperceiver-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 28
    patch_size: int = 7
    in_channels: int = 1
    dim: int = 64
    heads: int = 4
    depth: int = 6
    n_latents: int = 32
    ffn_ratio: float = 2.57
    rope_theta: float = 10000.0
    layer_scale_init: float = 1e-2
    token_grans: tuple = (4, 8, 16, 32)
    widths: tuple = (32, 48, 64)
    depths: tuple = (1, 2, 3, 4, 5, 6)
    embed_ffn: bool = True
    num_classes: int = 10
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        self.token_grans = tuple(int(t) for t in self.token_grans)
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(l) for l in self.depths)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size * self.patch_size

    @property
    def hidden(self) -> int:
        return hidden_kept(self.dim, self.ffn_ratio)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def hidden_for(self, width: int) -> int:
        return hidden_kept(width, self.ffn_ratio)

    def validate(self) -> "ModelConfig":
        problems = []
        if self.image_size % self.patch_size:
            problems.append("image_size must be divisible by patch_size")
        if self.dim % self.heads or (self.dim // self.heads) % 2:
            problems.append("dim / heads must be an even integer")
        grans = self.token_grans
        if not grans or grans[0] < 1 or any(b <= a for a, b in zip(grans, grans[1:])):
            problems.append("token_grans must be strictly increasing positive integers")
        elif grans[-1] != self.n_latents:
            problems.append("max(token_grans) must equal n_latents")
        if not self.widths or max(self.widths) != self.dim or min(self.widths) < 1:
            problems.append("max(widths) must equal dim")
        elif any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            problems.append("widths must be strictly increasing")
        if not self.depths or any(not 1 <= l <= self.depth for l in self.depths):
            problems.append("depths must lie in 1..depth")
        elif list(self.depths) != sorted(set(self.depths)):
            problems.append("depths must be strictly increasing")
        if problems:
            raise InvalidConfig("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("token_grans", "widths", "depths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        if name == "toy":
            return cls()
        if name == "paper":
            return cls(
                image_size=224,
                patch_size=14,
                in_channels=3,
                dim=832,
                heads=13,
                depth=21,
                n_latents=256,
                layer_scale_init=1e-5,
                token_grans=(32, 64, 96, 128, 192, 256),
                widths=(416, 624, 832),
                depths=tuple(range(1, 22)),
                num_classes=1000,
            )
        raise InvalidConfig(f"unknown preset {name!r}")


@dataclass(frozen=True)
class ConfigTuple:
    """One runnable sub-network: ``t`` latents, nominal width ``w``, ``l`` blocks."""

    t: int
    w: int
    l: int

    def validate(self, config: ModelConfig) -> "ConfigTuple":
        if self.t < 1:
            raise InvalidConfig(f"t must be >= 1, got {self.t}")
        if self.w not in config.widths:
            raise InvalidConfig(f"w={self.w} not in {config.widths}")
        if not 1 <= self.l <= config.depth:
            raise InvalidConfig(f"l={self.l} outside 1..{config.depth}")
        return self

    def label(self) -> str:
        return f"t{self.t}-w{self.w}-l{self.l}"


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class BlockParams:
    norm1: LayerNormParams
    attn: AttentionParams
    scale1: Tensor
    norm2: LayerNormParams
    up: MatLinearParams
    down: MatLinearParams
    scale2: Tensor


@dataclass
class TrainingOutputs:
    outputs: dict  # t -> logits [B, C]
    inter_outputs: dict  # l -> logits [B, C]
    depth_tokens: dict  # l -> sampled t_l


@dataclass
class _Init:
    rng: np.random.Generator
    std: float
    dtype: object
    params: dict = field(default_factory=dict)

    def weight(self, name, shape):
        t = Tensor(trunc_normal(self.rng, shape, self.std).astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def const(self, name, shape, value):
        t = Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def norm(self, prefix, dim):
        return LayerNormParams(self.const(f"{prefix}.gain", dim, 1.0), self.const(f"{prefix}.bias", dim, 0.0))

    def linear(self, prefix, out_dim, in_dim, bias=True):
        w = self.weight(f"{prefix}.weight", (out_dim, in_dim))
        b = self.const(f"{prefix}.bias", out_dim, 0.0) if bias else None
        return MatLinearParams(w, b)

    def attention(self, prefix, dim, heads):
        parts = {}
        for k in ("q", "k", "v", "o"):
            parts[f"w{k}"] = self.weight(f"{prefix}.w{k}", (dim, dim))
            parts[f"b{k}"] = self.const(f"{prefix}.b{k}", dim, 0.0)
        return AttentionParams(heads=heads, **parts)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, (H/p)(W/p), C*p*p]``, patches row-major, features (C, py, px)."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // patch) * (w // patch), c * patch * patch))


class AdaPerceiver:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config.validate()
        self.dtype = np.dtype(dtype or default_dtype())
        cfg = config
        init = _Init(np.random.default_rng(seed), cfg.init_std, self.dtype)
        self.patch = init.linear("patch", cfg.dim, cfg.patch_dim)
        if cfg.embed_ffn:
            self.embed_norm = init.norm("embed_ffn.norm", cfg.dim)
            self.embed_up = init.linear("embed_ffn.up", cfg.hidden, cfg.dim)
            self.embed_down = init.linear("embed_ffn.down", cfg.dim, cfg.hidden)
        self.latent = init.weight("latent", (cfg.dim,))
        self.enc_norm_q = init.norm("encode.norm_q", cfg.dim)
        self.enc_norm_kv = init.norm("encode.norm_kv", cfg.dim)
        self.enc_attn = init.attention("encode.attn", cfg.dim, cfg.heads)
        self.blocks: list[BlockParams] = []
        for i in range(cfg.depth):
            p = f"blocks.{i}"
            self.blocks.append(
                BlockParams(
                    norm1=init.norm(f"{p}.norm1", cfg.dim),
                    attn=init.attention(f"{p}.attn", cfg.dim, cfg.heads),
                    scale1=init.const(f"{p}.scale1", cfg.dim, cfg.layer_scale_init),
                    norm2=init.norm(f"{p}.norm2", cfg.dim),
                    up=init.linear(f"{p}.ffn.up", cfg.hidden, cfg.dim),
                    down=init.linear(f"{p}.ffn.down", cfg.dim, cfg.hidden),
                    scale2=init.const(f"{p}.scale2", cfg.dim, cfg.layer_scale_init),
                )
            )
        self.out_token = init.weight("out_token", (cfg.dim,))
        self.dec_norm_q = init.norm("decode.norm_q", cfg.dim)
        self.dec_norm_kv = init.norm("decode.norm_kv", cfg.dim)
        self.dec_attn = init.attention("decode.attn", cfg.dim, cfg.heads)
        self.head_norm = init.norm("head.norm", cfg.dim)
        self.head = init.linear("head", cfg.num_classes, cfg.dim)
        self.params: dict[str, Tensor] = init.params
        self.rope = RopeParams(cfg.head_dim, cfg.rope_theta)
        self.block_mask = create_block_mask(cfg.token_grans)

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self, prefix: str | None = None) -> int:
        return sum(
            p.data.size for name, p in self.params.items() if prefix is None or name.startswith(prefix)
        )

    def readout_parameter_ratio(self) -> float:
        """Share of parameters in the output token, decode cross-attention and head."""
        readout = sum(self.num_parameters(p) for p in ("out_token", "decode.", "head"))
        return readout / self.num_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise InvalidConfig(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise InvalidConfig(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    # ------------------------------------------------------------ components

    def _norm(self, x: Tensor, p: LayerNormParams) -> Tensor:
        return layer_norm(x, p.gain, p.bias, self.config.norm_eps)

    def _as_images(self, images) -> np.ndarray:
        cfg = self.config
        arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[1] != cfg.in_channels:
            raise BadImageShape(f"expected [B, {cfg.in_channels}, H, W], got {arr.shape}")
        h, w = arr.shape[2:]
        if h % cfg.patch_size or w % cfg.patch_size:
            raise BadImageShape(f"{h}x{w} not divisible by patch size {cfg.patch_size}")
        if (h, w) != (cfg.image_size, cfg.image_size):
            raise BadImageShape(f"expected {cfg.image_size}x{cfg.image_size}, got {h}x{w}")
        return arr

    def patch_embed(self, images) -> Tensor:
        arr = self._as_images(images)
        patches = Tensor(patchify(arr, self.config.patch_size))
        x = linear(patches, self.patch.weight, self.patch.bias)
        if self.config.embed_ffn:
            x = add(x, ffn(self._norm(x, self.embed_norm), self.embed_up, self.embed_down))
        return x

    def encode(self, tokens: Tensor, n_latents: int) -> Tensor:
        if n_latents < 1:
            raise InvalidConfig("n_latents must be >= 1")
        b = tokens.shape[0]
        z = broadcast(self.latent, (b, n_latents, self.config.dim))
        read = attend(
            self._norm(z, self.enc_norm_q),
            self._norm(tokens, self.enc_norm_kv),
            self.enc_attn,
            rope_sink=self.rope,
        )
        return add(z, read)

    def block_forward(
        self,
        z: Tensor,
        block: BlockParams,
        mask: BlockMask | np.ndarray | None,
        hidden: Sequence[int] | int | None = None,
    ) -> Tensor:
        """Pre-norm block; ``hidden`` per sample selects masked widths, an ``int`` selects sliced inference."""
        a = block_masked_attention(self._norm(z, block.norm1), mask, block.attn, self.rope)
        z = add(z, mul(a, block.scale1))
        h = self._norm(z, block.norm2)
        full = self.config.hidden
        if hidden is None:
            f = ffn(h, block.up, block.down)
        elif np.ndim(hidden) == 0:
            up, down = slice_for_inference(block.up, block.down, int(hidden))
            f = ffn(h, up, down)
        else:
            hidden = np.asarray(hidden)
            f = ffn(h, block.up, block.down) if (hidden == full).all() else mat_ffn(h, block.up, block.down, hidden)
        return add(z, mul(f, block.scale2))

    def forward_blocks(self, z0: Tensor, mask, hidden, depths: Sequence[int] | None = None):
        """Run every block; return ``(z_L, {l: z_l for l in depths})``."""
        keep = set(self.config.depths if depths is None else depths)
        captured = {}
        z = z0
        for l, block in enumerate(self.blocks, start=1):
            z = self.block_forward(z, block, mask, hidden)
            if l in keep:
                captured[l] = z
        return z, captured

    def readout(self, latents: Tensor, t: int | None = None, source_mask=None) -> Tensor:
        """Class logits from the output token reading ``latents[:, :t]``."""
        if t is not None:
            if t < 1:
                raise InvalidConfig("readout needs t >= 1")
            latents = slice_(latents, (slice(None), slice(0, t)))
        b = latents.shape[0]
        o = broadcast(self.out_token, (b, 1, self.config.dim))
        read = attend(
            self._norm(o, self.dec_norm_q),
            self._norm(latents, self.dec_norm_kv),
            self.dec_attn,
            source_mask=source_mask,
        )
        o = add(o, read)
        logits = linear(self._norm(o, self.head_norm), self.head.weight, self.head.bias)
        return slice_(logits, (slice(None), 0))

    # ------------------------------------------------------------ paths

    def forward_training(
        self,
        images,
        widths: Sequence[int],
        depth_tokens: dict | None = None,
        rng: np.random.Generator | None = None,
        with_depth: bool = True,
    ) -> TrainingOutputs:
        cfg = self.config
        widths = np.asarray(widths)
        arr = self._as_images(images)
        if widths.shape != (arr.shape[0],):
            raise InvalidConfig(f"need one width per sample, got {widths.shape} for batch {arr.shape[0]}")
        for w in np.unique(widths):
            if int(w) not in cfg.widths:
                raise InvalidConfig(f"width {w} not in {cfg.widths}")
        if with_depth and depth_tokens is None:
            rng = rng if rng is not None else np.random.default_rng()
            depth_tokens = sample_depth_tokens(cfg.depths, cfg.token_grans, rng)
        hidden = np.array([cfg.hidden_for(int(w)) for w in widths])
        tokens = self.patch_embed(arr)
        z0 = self.encode(tokens, cfg.n_latents)
        z_last, captured = self.forward_blocks(z0, self.block_mask, hidden, cfg.depths if with_depth else ())
        outputs = {t: self.readout(z_last, t) for t in cfg.token_grans}
        inter = {}
        if with_depth:
            inter = {l: self.readout(captured[l], depth_tokens[l]) for l in cfg.depths}
        return TrainingOutputs(outputs, inter, dict(depth_tokens or {}))

    def mask_for(self, t: int, bidirectional: bool = False):
        if bidirectional:
            return None
        return self.block_mask.restrict(t)

    def iter_depths(self, images, t: int, w: int, bidirectional: bool = False, max_depth: int | None = None) -> Iterator:
        """Yield ``(l, z_l)`` for ``l = 1..max_depth`` on the sliced inference path."""
        cfg = self.config
        max_depth = cfg.depth if max_depth is None else max_depth
        ConfigTuple(t, w, max_depth).validate(cfg)
        mask = self.mask_for(t, bidirectional)
        hidden = cfg.hidden_for(w)
        z = self.encode(self.patch_embed(images), t)
        for l in range(1, max_depth + 1):
            z = self.block_forward(z, self.blocks[l - 1], mask, hidden)
            yield l, z

    def forward_config(self, images, cfg: ConfigTuple, bidirectional: bool = False) -> Tensor:
        cfg.validate(self.config)
        z = None
        for _, z in self.iter_depths(images, cfg.t, cfg.w, bidirectional, cfg.l):
            pass
        return self.readout(z)

    def predict(self, images, cfg: ConfigTuple, bidirectional: bool = False, batch_size: int = 256) -> np.ndarray:
        """Logits as a numpy array, evaluated in batches."""
        arr = self._as_images(images)
        out = [
            self.forward_config(arr[i : i + batch_size], cfg, bidirectional).data
            for i in range(0, arr.shape[0], batch_size)
        ]
        return np.concatenate(out, axis=0)


def sample_depth_tokens(depths: Sequence[int], grans: Sequence[int], rng: np.random.Generator) -> dict:
    """One ``t_l ~ Uniform(grans)`` per supervised depth, drawn in ascending depth order."""
    return {int(l): int(grans[rng.integers(len(grans))]) for l in depths}


# ---------------------------------------------------------------- checkpoints
#
# A checkpoint is a numpy ``.npz`` archive:
#   __meta__          0-d unicode array holding JSON
#                     {"format", "version", "config", "dtype", "extra"}
#   param/<name>      one array per model parameter
#   state/<key>       optional arrays supplied by the caller (optimizer moments)


def save_checkpoint(path, model: AdaPerceiver, extra: dict | None = None, arrays: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "dtype": model.dtype.name,
        "extra": extra or {},
    }
    payload = {"__meta__": np.array(json.dumps(meta, sort_keys=True))}
    for name, p in model.params.items():
        payload[f"param/{name}"] = p.data
    for key, arr in (arrays or {}).items():
        payload[f"state/{key}"] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[AdaPerceiver, dict, dict]:
    """Return ``(model, extra, state_arrays)``."""
    with np.load(Path(path), allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise InvalidConfig(f"{path}: not a checkpoint (no __meta__)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise InvalidConfig(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version", 0) > CHECKPOINT_VERSION:
            raise InvalidConfig(f"{path}: checkpoint version {meta['version']} is newer than supported")
        config = ModelConfig.from_dict(meta["config"])
        model = AdaPerceiver(config, dtype=np.dtype(meta["dtype"]))
        model.load_state_dict({k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")})
        state = {k[len("state/"):]: npz[k] for k in npz.files if k.startswith("state/")}
    return model, meta.get("extra", {}), state
