"""Invariant suite behind ``adaperceiver selftest``.

Every check is deterministic at a fixed seed and returns a measured value and
the tolerance it is held to, so the CSV it writes is byte-stable per platform.
"""

from __future__ import annotations

import csv
import io
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import costmodel, kernels
from .attention import AttentionParams, RopeParams, block_masked_attention, create_block_mask, rope_rotate
from .data import Split, read_idx, write_idx
from .matryoshka import MatLinearParams, ffn, hidden_kept, mat_ffn, slice_for_inference
from .model import AdaPerceiver, ConfigTuple, ModelConfig, load_checkpoint, save_checkpoint
from .policy import early_exit_infer, evaluate_grid, oracle_build, run_policy
from .tensor import Tape, Tensor, backward, finite_diff_check, precision, sum_
from .training import AdamW, TrainStage, joint_loss, train_step

CSV_COLUMNS = ("check", "passed", "value", "tolerance")


def small_config(**overrides) -> ModelConfig:
    base = dict(
        dim=32, heads=4, depth=3, n_latents=16, token_grans=(4, 8, 16), widths=(16, 24, 32),
        depths=(1, 2, 3), layer_scale_init=0.5, init_std=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def gradcheck_config() -> ModelConfig:
    """Toy size for the gradient oracle: d=16, L=2, N=8."""
    return ModelConfig(
        dim=16, heads=2, depth=2, n_latents=8, token_grans=(2, 4, 8), widths=(8, 12, 16),
        depths=(1, 2), layer_scale_init=0.5, init_std=0.2,
    )


def gradcheck_joint_loss(seed: int = 0, eps: float = 1e-3, batch: int = 2, max_entries: int | None = 12) -> float:
    """Max relative error of the full joint loss (stage ``all``) against central differences, float64."""
    with precision("high"):
        model = AdaPerceiver(gradcheck_config(), seed=seed)
        rng = np.random.default_rng(seed)
        images = rng.normal(size=(batch, 1, 28, 28))
        labels = rng.integers(0, 10, size=batch)

        def f():
            total, *_ = joint_loss(model, images, labels, TrainStage("all"), np.random.default_rng(seed + 1))
            return total

        return finite_diff_check(f, model.parameters(), eps=eps, max_entries=max_entries, rng=np.random.default_rng(seed))


# ---------------------------------------------------------------- checks


def check_truncation_attention(seed=0):
    rng = np.random.default_rng(seed)
    d, heads, n = 32, 4, 16
    grans = (4, 8, 16)
    with precision("high"):
        params = AttentionParams.init(d, heads, rng, std=0.3, dtype=np.float64)
        rope = RopeParams(d // heads)
        x = Tensor(rng.normal(size=(2, n, d)))
        mask = create_block_mask(grans)
        full = block_masked_attention(x, mask, params, rope).data
        worst = 0.0
        for t in grans:
            part = block_masked_attention(Tensor(x.data[:, :t]), mask.restrict(t), params, rope).data
            worst = max(worst, float(np.abs(full[:, :t] - part).max()))
    return worst, 1e-5


def check_truncation_blocks(seed=0):
    with precision("high"):
        model = AdaPerceiver(small_config(), seed=seed)
        rng = np.random.default_rng(seed)
        z = Tensor(rng.normal(size=(2, 16, 32)))
        full, _ = model.forward_blocks(z, model.block_mask, None, ())
        worst = 0.0
        for t in model.config.token_grans:
            part, _ = model.forward_blocks(Tensor(z.data[:, :t]), model.block_mask.restrict(t), None, ())
            worst = max(worst, float(np.abs(full.data[:, :t] - part.data).max()))
    return worst, 1e-5


def check_single_pass(seed=0):
    with precision("high"):
        model = AdaPerceiver(small_config(), seed=seed)
        cfg = model.config
        rng = np.random.default_rng(seed)
        images = rng.normal(size=(3, 1, 28, 28))
        widths = np.array(cfg.widths)
        depth_tokens = {1: 4, 2: 16, 3: 8}
        out = model.forward_training(images, widths, depth_tokens)
        worst = 0.0
        for i, w in enumerate(widths):
            for t, logits in out.outputs.items():
                ref = model.forward_config(images[i : i + 1], ConfigTuple(t, int(w), cfg.depth)).data
                worst = max(worst, float(np.abs(logits.data[i] - ref[0]).max()))
            for l, logits in out.inter_outputs.items():
                ref = model.forward_config(images[i : i + 1], ConfigTuple(depth_tokens[l], int(w), l)).data
                worst = max(worst, float(np.abs(logits.data[i] - ref[0]).max()))
    return worst, 1e-5


def _mat_ffn_params(seed):
    rng = np.random.default_rng(seed)
    d, ratio = 32, 2.57
    full = hidden_kept(d, ratio)
    up = MatLinearParams(Tensor(rng.normal(size=(full, d)) * 0.2, requires_grad=True), Tensor(rng.normal(size=full) * 0.1, requires_grad=True))
    down = MatLinearParams(Tensor(rng.normal(size=(d, full)) * 0.2, requires_grad=True), Tensor(rng.normal(size=d) * 0.1, requires_grad=True))
    x = Tensor(rng.normal(size=(2, 5, d)))
    return up, down, x, ratio


def check_mask_slice(seed=0):
    worst = 0.0
    with precision("high"):
        up, down, x, ratio = _mat_ffn_params(seed)
        for w in (16, 24, 32):
            k = hidden_kept(w, ratio)
            masked = mat_ffn(x, up, down, [k, k]).data
            sliced = ffn(x, *slice_for_inference(up, down, k)).data
            worst = max(worst, float(np.abs(masked - sliced).max()))
    return worst, 1e-6


def check_mask_grad_zero(seed=0):
    leaked = 0.0
    with precision("high"):
        up, down, x, ratio = _mat_ffn_params(seed)
        for w in (16, 24, 32):
            k = hidden_kept(w, ratio)
            for p in (up.weight, up.bias, down.weight):
                p.grad = None
            with Tape() as tape:
                loss = sum_(mat_ffn(x, up, down, [k, k]))
            backward(loss, tape, leaves=[up.weight, up.bias, down.weight])
            for g in (up.weight.grad[k:], up.bias.grad[k:], down.weight.grad[:, k:]):
                leaked = max(leaked, float(np.abs(g).max(initial=0.0)))
    return leaked, 0.0


def check_rope_relative(seed=0, draws=1000):
    rng = np.random.default_rng(seed)
    hd = 8
    rope = RopeParams(hd)
    worst = 0.0
    with precision("high"):
        for _ in range(draws):
            q = rng.normal(size=(1, hd))
            k = rng.normal(size=(1, hd))
            m, n, s = (int(v) for v in rng.integers(0, 64, size=3))
            a = rope_rotate(Tensor(q), [m], rope).data @ rope_rotate(Tensor(k), [n], rope).data.T
            b = rope_rotate(Tensor(q), [m + s], rope).data @ rope_rotate(Tensor(k), [n + s], rope).data.T
            worst = max(worst, float(abs(a - b).max()))
    return worst, 1e-5


def check_gradcheck(seed=0):
    return gradcheck_joint_loss(seed), 1e-3


def check_flops_monotone(seed=0):
    mc = ModelConfig()
    bad = 0
    for t in mc.token_grans:
        for w in mc.widths:
            for l in mc.depths:
                base = costmodel.flops_forward(ConfigTuple(t, w, l), mc).total
                if t != max(mc.token_grans):
                    nt = mc.token_grans[mc.token_grans.index(t) + 1]
                    bad += costmodel.flops_forward(ConfigTuple(nt, w, l), mc).total <= base
                if w != max(mc.widths):
                    nw = mc.widths[mc.widths.index(w) + 1]
                    bad += costmodel.flops_forward(ConfigTuple(t, nw, l), mc).total <= base
                if l != mc.depth:
                    bad += costmodel.flops_forward(ConfigTuple(t, w, l + 1), mc).total <= base
    return float(bad), 0.0


def _random_split(model, n, seed):
    rng = np.random.default_rng(seed)
    return Split(rng.normal(size=(n, 1, 28, 28)).astype(model.dtype), rng.integers(0, model.config.num_classes, size=n))


def check_early_exit_identity(seed=0):
    model = AdaPerceiver(small_config(), seed=seed)
    split = _random_split(model, 12, seed)
    t, w = 8, 32
    res = early_exit_infer(model, split.images, t, tau=1.5, w=w, batch_size=5)
    ref = evaluate_grid(model, split.images, [ConfigTuple(t, w, model.config.depth)], batch_size=5)
    ref_pred = next(iter(ref.values())).argmax(axis=1)
    mismatch = int((res.predictions != ref_pred).sum()) + int((res.exit_depths != model.config.depth).sum())
    return float(mismatch), 0.0


def check_oracle_dominance(seed=0):
    model = AdaPerceiver(small_config(), seed=seed)
    split = _random_split(model, 20, seed)
    mc = model.config
    configs = [ConfigTuple(t, w, l) for t in mc.token_grans for w in mc.widths for l in mc.depths]
    table = oracle_build(model, split, configs, batch_size=10)
    oracle = run_policy("oracle", split, model, {"table": table}, batch_size=10)
    fixed = [run_policy("baseline", split, model, {"t": c.t, "w": c.w, "l": c.l}, batch_size=10) for c in configs]
    gap = max(0.0, max(r.accuracy for r in fixed) - oracle.accuracy)
    gap += max(0.0, oracle.mean_flops - max(r.mean_flops for r in fixed))
    return gap, 0.0


def check_idx_roundtrip(seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(7, 28, 28)).astype(np.uint8)
    with tempfile.TemporaryDirectory() as d:
        back = read_idx(write_idx(Path(d) / "x.idx", arr))
    return float(np.abs(back.astype(int) - arr.astype(int)).max()), 0.0


def check_checkpoint_roundtrip(seed=0):
    model = AdaPerceiver(small_config(), seed=seed)
    with tempfile.TemporaryDirectory() as d:
        loaded, _, _ = load_checkpoint(save_checkpoint(Path(d) / "m.npz", model))
    diff = max(float(np.abs(a - loaded.params[k].data).max()) for k, a in model.state_dict().items())
    return diff, 0.0


def check_descent(seed=0):
    model = AdaPerceiver(small_config(layer_scale_init=0.01, init_std=0.02), seed=seed)
    opt = AdamW(model.params)
    split = _random_split(model, 8, seed)
    rng = np.random.default_rng(seed)
    losses = [train_step(model, opt, split.images, split.labels, TrainStage("token_only"), rng, 1e-3, step=i).joint_loss for i in range(3)]
    # value is the increase from first to last step; it must be negative
    return losses[-1] - losses[0], 0.0


def check_kernels_agree(seed=0):
    if not kernels.compiled_available():
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 7, 11))
    mask = rng.random((7, 11)) < 0.7
    mask[:, 0] = True
    c, p = kernels.BACKENDS["compiled"], kernels.BACKENDS["numpy"]
    gain, bias = rng.normal(size=11), rng.normal(size=11)
    diffs = [
        np.abs(c.softmax_fwd(x, mask) - p.softmax_fwd(x, mask)).max(),
        np.abs(c.gelu_fwd(x) - p.gelu_fwd(x)).max(),
        np.abs(c.layernorm_fwd(x, gain, bias, 1e-6)[0] - p.layernorm_fwd(x, gain, bias, 1e-6)[0]).max(),
    ]
    return float(max(diffs)), 1e-12


CHECKS: dict[str, Callable] = {
    "truncation_attention": check_truncation_attention,
    "truncation_blocks": check_truncation_blocks,
    "single_pass": check_single_pass,
    "mask_slice": check_mask_slice,
    "mask_grad_zero": check_mask_grad_zero,
    "rope_relative": check_rope_relative,
    "gradcheck": check_gradcheck,
    "flops_monotone": check_flops_monotone,
    "early_exit_identity": check_early_exit_identity,
    "oracle_dominance": check_oracle_dominance,
    "idx_roundtrip": check_idx_roundtrip,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
    "descent": check_descent,
    "kernels_agree": check_kernels_agree,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float


def run_selftest(seed: int = 0, names=None, progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        value, tol = fn(seed)
        passed = value < 0 if name == "descent" else value <= tol
        r = CheckResult(name, bool(passed), float(value), float(tol))
        results.append(r)
        if progress:
            progress(r)
    return results


def results_csv(results: list[CheckResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow((r.name, int(r.passed), repr(r.value), repr(r.tolerance)))
    return buf.getvalue()
