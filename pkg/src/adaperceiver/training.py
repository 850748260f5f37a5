"""Once-for-all training: the joint token/depth/width objective and the optimisation loop.

Each step draws, in this order from one generator, a width per sample (only
in stage ``all``) and then one readout granularity per supervised depth in
ascending depth order (stages ``token_depth`` and ``all``). Batch order comes
from a separate generator seeded by ``(seed, epoch)`` so it needs no state.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, Split
from .errors import InvalidConfig, NonFiniteLoss
from .model import AdaPerceiver, ConfigTuple, load_checkpoint, sample_depth_tokens, save_checkpoint
from .tensor import Tape, Tensor, add, backward, cross_entropy, mean, mul

STAGES = ("token_only", "token_depth", "all")
METRIC_COLUMNS = ("step", "stage", "joint_loss", "token_loss", "depth_loss", "grad_norm", "lr")
VAL_COLUMNS = ("epoch", "stage", "mean_joint_loss", "config", "val_accuracy")


# ---------------------------------------------------------------- objective


@dataclass(frozen=True)
class LossWeights:
    """Linear depth ramp ``l / L``; token terms carry weight one."""

    depth: int

    def depth_weight(self, l: int) -> float:
        if not 1 <= l <= self.depth:
            raise InvalidConfig(f"depth {l} outside 1..{self.depth}")
        return l / self.depth


@dataclass(frozen=True)
class TrainStage:
    name: str

    def __post_init__(self):
        if self.name not in STAGES:
            raise InvalidConfig(f"unknown stage {self.name!r}; expected one of {STAGES}")

    @property
    def depth_active(self) -> bool:
        return self.name != "token_only"

    @property
    def widths_active(self) -> bool:
        return self.name == "all"


def token_loss(outputs: dict, labels, smoothing: float = 0.0) -> Tensor:
    """Sum over granularities of the batch-mean cross-entropy."""
    total = None
    for t in sorted(outputs):
        term = mean(cross_entropy(outputs[t], labels, smoothing))
        total = term if total is None else add(total, term)
    if total is None:
        raise InvalidConfig("token_loss needs at least one output")
    return total


def depth_loss(inter_outputs: dict, labels, weights: LossWeights, smoothing: float = 0.0) -> Tensor:
    """Ramp-weighted sum over depths of the batch-mean cross-entropy."""
    total = None
    for l in sorted(inter_outputs):
        term = mul(mean(cross_entropy(inter_outputs[l], labels, smoothing)), weights.depth_weight(l))
        total = term if total is None else add(total, term)
    if total is None:
        raise InvalidConfig("depth_loss needs at least one output")
    return total


def sample_widths(batch_size: int, widths: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform width per sample."""
    widths = np.asarray(widths, dtype=np.int64)
    if widths.size == 0:
        raise InvalidConfig("width set is empty")
    return widths[rng.integers(widths.size, size=batch_size)]


# ---------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()}, {k: np.zeros_like(p.data) for k, p in params.items()})

    def arrays(self) -> dict:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, step: int) -> "OptimState":
        m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m/")}
        v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v/")}
        return cls(m, v, step)


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices only; norms, biases, scales and learned tokens are exempt."""
    return p.data.ndim >= 2


class AdamW:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimState.zeros(params)

    def reset(self) -> None:
        self.state = OptimState.zeros(self.params)

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and decays(name, p):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, base: float, warmup: int, final_frac: float = 0.01) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to ``final_frac * base`` at ``total``."""
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * (final_frac + (1.0 - final_frac) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the norm before clipping."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------- step


@dataclass
class StepMetrics:
    step: int
    stage: str
    joint_loss: float
    token_loss: float
    depth_loss: float
    grad_norm: float
    lr: float

    def row(self) -> list:
        return [self.step, self.stage, _fmt(self.joint_loss), _fmt(self.token_loss), _fmt(self.depth_loss), _fmt(self.grad_norm), _fmt(self.lr)]


def _fmt(x: float) -> str:
    return repr(float(x))


def joint_loss(model: AdaPerceiver, images, labels, stage: TrainStage, rng: np.random.Generator, smoothing: float = 0.0):
    """Draw the step's widths and depth granularities, run the single pass and return the loss terms."""
    cfg = model.config
    batch = len(labels)
    if stage.widths_active:
        widths = sample_widths(batch, cfg.widths, rng)
    else:
        widths = np.full(batch, max(cfg.widths), dtype=np.int64)
    depth_tokens = sample_depth_tokens(cfg.depths, cfg.token_grans, rng) if stage.depth_active else None
    out = model.forward_training(images, widths, depth_tokens, with_depth=stage.depth_active)
    tok = token_loss(out.outputs, labels, smoothing)
    dep = depth_loss(out.inter_outputs, labels, LossWeights(cfg.depth), smoothing) if stage.depth_active else None
    total = tok if dep is None else add(tok, dep)
    return total, tok, dep, out, widths


def train_step(
    model: AdaPerceiver,
    opt: AdamW,
    images,
    labels,
    stage: TrainStage,
    rng: np.random.Generator,
    lr: float,
    clip: float = 3.0,
    smoothing: float = 0.0,
    step: int = 0,
) -> StepMetrics:
    params = model.parameters()
    for p in params:
        p.grad = None
    with Tape() as tape:
        total, tok, dep, _, _ = joint_loss(model, images, labels, stage, rng, smoothing)
    loss = total.item()
    tok_v = tok.item()
    dep_v = 0.0 if dep is None else dep.item()
    if not math.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss at step {step}",
            {"step": step, "stage": stage.name, "token_loss": tok_v, "depth_loss": dep_v, "lr": lr},
        )
    backward(total, tape, leaves=params)
    norm = clip_grad_norm(params, clip)
    if not math.isfinite(norm):
        raise NonFiniteLoss(
            f"non-finite gradient norm at step {step}",
            {"step": step, "stage": stage.name, "joint_loss": loss, "grad_norm": norm, "lr": lr},
        )
    opt.step(lr)
    return StepMetrics(step, stage.name, loss, tok_v, dep_v, norm, lr)


# ---------------------------------------------------------------- loop


@dataclass
class StageSpec:
    stage: str
    epochs: int
    lr: float

    def __post_init__(self):
        TrainStage(self.stage)
        if self.epochs < 0 or self.lr < 0:
            raise InvalidConfig("epochs and lr must be nonnegative")


def default_schedule() -> list[StageSpec]:
    return [StageSpec("token_only", 2, 2e-3), StageSpec("token_depth", 2, 2e-3), StageSpec("all", 3, 2e-3)]


@dataclass
class TrainConfig:
    schedule: list = field(default_factory=default_schedule)
    batch_size: int = 64
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.01
    clip: float = 3.0
    smoothing: float = 0.0
    seed: int = 0
    reset_optimizer: bool = True
    val_configs: list | None = None  # list of (t, w, l); None = min and max configs
    eval_batch: int = 250

    def __post_init__(self):
        self.schedule = [s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.schedule]
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [asdict(s) for s in self.schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def accuracy(model: AdaPerceiver, split: Split, cfg: ConfigTuple, batch_size: int = 250) -> float:
    if len(split) == 0:
        return float("nan")
    logits = model.predict(split.images, cfg, batch_size=batch_size)
    return float(np.mean(logits.argmax(axis=1) == split.labels))


def extreme_configs(model: AdaPerceiver) -> list[ConfigTuple]:
    c = model.config
    return [ConfigTuple(max(c.token_grans), max(c.widths), c.depth), ConfigTuple(min(c.token_grans), min(c.widths), c.depth)]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


class _CsvLog:
    def __init__(self, path: Path | None, columns):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            if not path.exists():
                with open(path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(columns)

    def write(self, row) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row)


@dataclass
class TrainResult:
    model: AdaPerceiver
    metrics: list
    val: list
    checkpoints: list
    seconds: float


def train(
    model: AdaPerceiver,
    dataset: Dataset,
    config: TrainConfig | None = None,
    out_dir=None,
    resume=None,
    log_every: int = 0,
    stop_after_stage: int | None = None,
) -> TrainResult:
    """Run the stage schedule over one parameter set.

    Writes ``metrics.csv`` (one row per step), ``val.csv`` (one row per epoch
    and validation config) and ``stage{i}_{name}.npz`` checkpoints when
    ``out_dir`` is given. ``resume`` continues after the stage stored in a
    stage checkpoint; the continuation reproduces an uninterrupted run exactly.
    """
    config = config or TrainConfig()
    out = Path(out_dir) if out_dir is not None else None
    metrics_log = _CsvLog(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    val_log = _CsvLog(out / "val.csv" if out else None, VAL_COLUMNS)
    opt = AdamW(model.params, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    start_stage, global_step, epoch_index = 0, 0, 0
    if resume is not None:
        loaded, extra, arrays = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        start_stage = extra["stage_index"] + 1
        global_step = extra["global_step"]
        epoch_index = extra["epoch_index"]
        rng = _restore_rng(extra["rng"])
        opt.state = OptimState.from_arrays(arrays, extra["opt_step"])
    val_cfgs = [ConfigTuple(*c) for c in config.val_configs] if config.val_configs else extreme_configs(model)
    steps_per_epoch = len(dataset.train) // config.batch_size
    metrics, val_rows, checkpoints = [], [], []
    started = time.perf_counter()
    for si in range(start_stage, len(config.schedule)):
        spec = config.schedule[si]
        stage = TrainStage(spec.stage)
        if config.reset_optimizer:
            opt.reset()
        total = spec.epochs * steps_per_epoch
        warmup = max(1, int(round(config.warmup_frac * total)))
        stage_step = 0
        for _ in range(spec.epochs):
            order_rng = np.random.default_rng([config.seed, epoch_index])
            losses = []
            for images, labels in dataset.train.batches(config.batch_size, order_rng, drop_last=True):
                lr = cosine_lr(stage_step, total, spec.lr, warmup, config.final_lr_frac)
                m = train_step(model, opt, images, labels, stage, rng, lr, config.clip, config.smoothing, global_step)
                metrics.append(m)
                metrics_log.write(m.row())
                losses.append(m.joint_loss)
                global_step += 1
                stage_step += 1
                if log_every and global_step % log_every == 0:
                    print(f"step {global_step} {stage.name} loss {m.joint_loss:.4f} lr {lr:.2e}", flush=True)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            for cfg in val_cfgs:
                acc = accuracy(model, dataset.val, cfg, config.eval_batch)
                row = [epoch_index, stage.name, _fmt(mean_loss), cfg.label(), _fmt(acc)]
                val_rows.append(row)
                val_log.write(row)
            epoch_index += 1
        if out is not None:
            extra = {
                "stage_index": si,
                "stage": stage.name,
                "global_step": global_step,
                "epoch_index": epoch_index,
                "opt_step": opt.state.step,
                "rng": _rng_state(rng),
                "train_config": config.to_dict(),
            }
            path = save_checkpoint(out / f"stage{si}_{stage.name}.npz", model, extra=extra, arrays=opt.state.arrays())
            checkpoints.append(path)
        if stop_after_stage is not None and si >= stop_after_stage:
            break
    if out is not None:
        (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return TrainResult(model, metrics, val_rows, checkpoints, time.perf_counter() - started)
