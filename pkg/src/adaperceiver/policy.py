"""Configuration-selection policies over a trained model.

* baseline: one fixed ``(t, w, l)`` for every input.
* ee: fixed ``(t, w)``; read out after each supervised depth and stop at the
  first prediction whose max-softmax reaches ``tau``.
* rl: a small MLP-Mixer network over the input tokens picks ``t`` (width and
  depth at their maximum), optionally combined with early exit.
* oracle: per input, the cheapest evaluated configuration that is correct.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import costmodel
from .attention import linear, trunc_normal
from .data import Split
from .errors import InvalidConfig, ShapeMismatch, UnknownPolicy
from .model import AdaPerceiver, ConfigTuple
from .tensor import Tape, Tensor, add, backward, cross_entropy, gelu, layer_norm, mean, mul, no_record, transpose

POLICY_KINDS = ("baseline", "ee", "rl", "rl_ee", "oracle")
RECORD_COLUMNS = ("input_id", "t", "w", "l", "correct", "confidence", "flops")


@dataclass
class EvalRecord:
    input_id: int
    config: ConfigTuple
    correct: bool
    confidence: float
    flops: int

    def row(self) -> list:
        c = self.config
        return [self.input_id, c.t, c.w, c.l, int(self.correct), repr(float(self.confidence)), self.flops]


@dataclass
class PolicyResult:
    policy: str
    accuracy: float
    mean_flops: float
    records: list = field(default_factory=list)

    @property
    def gflops(self) -> float:
        return self.mean_flops / 1e9

    @classmethod
    def from_records(cls, policy: str, records: list) -> "PolicyResult":
        acc = float(np.mean([r.correct for r in records])) if records else float("nan")
        fl = float(np.mean([r.flops for r in records])) if records else float("nan")
        return cls(policy, acc, fl, records)


def softmax_confidence(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p.max(axis=1) / p.sum(axis=1)


def config_flops(model: AdaPerceiver, cfg: ConfigTuple) -> int:
    return costmodel.flops_forward(cfg, model.config).total


def _batches(n: int, batch_size: int):
    for i in range(0, n, batch_size):
        yield slice(i, min(n, i + batch_size))


# ---------------------------------------------------------------- grid evaluation


def evaluate_grid(model: AdaPerceiver, images, configs: Sequence[ConfigTuple], batch_size: int = 250) -> dict:
    """Logits for every config, sharing one block pass per ``(t, w)`` pair.

    Each config's result is computed by exactly the operations
    ``forward_config`` performs on the same batch, so values match it bitwise.
    """
    configs = [c.validate(model.config) for c in configs]
    groups: dict = {}
    for c in configs:
        groups.setdefault((c.t, c.w), set()).add(c.l)
    images = model._as_images(images)
    out = {c: [] for c in configs}
    with no_record():
        for sl in _batches(len(images), batch_size):
            for (t, w), depths in groups.items():
                for l, z in model.iter_depths(images[sl], t, w, max_depth=max(depths)):
                    if l in depths:
                        out[ConfigTuple(t, w, l)].append(model.readout(z).data)
    return {c: np.concatenate(v, axis=0) for c, v in out.items()}


def pareto_flags(accuracy: Sequence[float], flops: Sequence[float]) -> list[bool]:
    """A row is on the front iff no other row has accuracy >= and strictly fewer flops."""
    acc = np.asarray(accuracy, dtype=np.float64)
    fl = np.asarray(flops, dtype=np.float64)
    return [not bool(np.any((acc >= acc[i]) & (fl < fl[i]))) for i in range(len(acc))]


# ---------------------------------------------------------------- early exit


@dataclass
class EarlyExitResult:
    predictions: np.ndarray
    exit_depths: np.ndarray
    flops: np.ndarray
    confidence: np.ndarray
    readouts: np.ndarray


def early_exit_infer(
    model: AdaPerceiver,
    images,
    t: int,
    tau: float,
    w: int | None = None,
    depths: Sequence[int] | None = None,
    batch_size: int = 250,
) -> EarlyExitResult:
    """Per-sample early exit at the first readout depth whose confidence reaches ``tau``.

    The whole batch keeps running so that a sample that never exits sees the
    same computation as the fixed-depth path. FLOPs charge each sample for
    the blocks it needed and every readout performed on its behalf.
    """
    if tau < 0:
        raise InvalidConfig("tau must be nonnegative")
    mc = model.config
    w = max(mc.widths) if w is None else w
    depths = sorted(set(mc.depths if depths is None else depths) | {mc.depth})
    images = model._as_images(images)
    n = len(images)
    preds = np.zeros(n, dtype=np.int64)
    exit_l = np.zeros(n, dtype=np.int64)
    conf = np.zeros(n, dtype=np.float64)
    reads = np.zeros(n, dtype=np.int64)
    with no_record():
        for sl in _batches(n, batch_size):
            idx = np.arange(sl.start, sl.stop)
            active = np.ones(len(idx), dtype=bool)
            for l, z in model.iter_depths(images[sl], t, w):
                if l not in depths:
                    continue
                logits = model.readout(z).data
                c = softmax_confidence(logits)
                reads[idx[active]] += 1
                done = active & ((c >= tau) | (l == mc.depth))
                preds[idx[done]] = logits[done].argmax(axis=1)
                conf[idx[done]] = c[done]
                exit_l[idx[done]] = l
                active &= ~done
                if not active.any():
                    break
    flops = np.array(
        [costmodel.early_exit_flops(ConfigTuple(t, w, int(l)), mc, int(r)) for l, r in zip(exit_l, reads)],
        dtype=np.int64,
    )
    return EarlyExitResult(preds, exit_l, flops, conf, reads)


# ---------------------------------------------------------------- policy network


@dataclass
class _Mlp:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class _Norm:
    gain: Tensor
    bias: Tensor


@dataclass
class MixerBlockParams:
    token_norm: _Norm
    token_mlp: _Mlp  # over the sequence axis
    channel_norm: _Norm
    channel_mlp: _Mlp  # over features


class PolicyNet:
    """Two MLP-Mixer blocks (expansion 2, pre-norm), mean pool, fusion MLP, bias-free head."""

    def __init__(self, dim: int, seq_len: int, token_choices: Sequence[int], seed: int = 0, expansion: int = 2, dtype=np.float32):
        if not token_choices:
            raise InvalidConfig("policy needs at least one action")
        self.dim, self.seq_len = dim, seq_len
        self.token_choices = tuple(int(t) for t in token_choices)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def w(name, shape):
            t = Tensor(trunc_normal(rng, shape, 0.02).astype(dtype), requires_grad=True, name=name)
            self.params[name] = t
            return t

        def c(name, shape, value):
            t = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True, name=name)
            self.params[name] = t
            return t

        def mlp(prefix, d, hidden):
            return _Mlp(w(f"{prefix}.w1", (hidden, d)), c(f"{prefix}.b1", hidden, 0.0), w(f"{prefix}.w2", (d, hidden)), c(f"{prefix}.b2", d, 0.0))

        def norm(prefix, d):
            return _Norm(c(f"{prefix}.gain", d, 1.0), c(f"{prefix}.bias", d, 0.0))

        self.blocks = [
            MixerBlockParams(
                norm(f"mixer{i}.token_norm", dim),
                mlp(f"mixer{i}.token_mlp", seq_len, expansion * seq_len),
                norm(f"mixer{i}.channel_norm", dim),
                mlp(f"mixer{i}.channel_mlp", dim, expansion * dim),
            )
            for i in range(2)
        ]
        self.fuse_norm = norm("fuse.norm", dim)
        self.fuse1 = (w("fuse.w1", (dim, dim)), c("fuse.b1", dim, 0.0))
        self.fuse2 = (w("fuse.w2", (dim, dim)), c("fuse.b2", dim, 0.0))
        # zero head: the untrained policy is uniform over actions
        self.head = c("head.weight", (len(self.token_choices), dim), 0.0)
        self.expansion = expansion

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.params.items():
            p.data[...] = state[k]

    def flops(self) -> int:
        s, d, e = self.seq_len, self.dim, self.expansion
        ln = costmodel.LAYERNORM_PER_ELEM * s * d
        token = ln + d * (costmodel.ffn_flops(1, s, e * s)) + costmodel.ADD_PER_ELEM * s * d
        channel = ln + costmodel.ffn_flops(s, d, e * d) + costmodel.ADD_PER_ELEM * s * d
        pool = s * d
        fuse = costmodel.LAYERNORM_PER_ELEM * d + 2 * (costmodel.MAC * d * d + d + costmodel.GELU_PER_ELEM * d)
        head = costmodel.MAC * d * len(self.token_choices)
        return 2 * (token + channel) + pool + fuse + head


def _ln(x, n: _Norm):
    return layer_norm(x, n.gain, n.bias, 1e-6)


def _mlp(x, p: _Mlp):
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def policy_net_forward(policy: PolicyNet, tokens) -> Tensor:
    """Action logits ``[B, |T|]`` from input tokens ``[B, S, d]``."""
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens))
    if x.ndim != 3 or x.shape[1:] != (policy.seq_len, policy.dim):
        raise ShapeMismatch(f"policy expects [B, {policy.seq_len}, {policy.dim}], got {x.shape}")
    for blk in policy.blocks:
        y = transpose(_ln(x, blk.token_norm), (0, 2, 1))
        x = add(x, transpose(_mlp(y, blk.token_mlp), (0, 2, 1)))
        x = add(x, _mlp(_ln(x, blk.channel_norm), blk.channel_mlp))
    h = mean(x, axis=1)
    h = _ln(h, policy.fuse_norm)
    h = gelu(linear(h, *policy.fuse1))
    h = gelu(linear(h, *policy.fuse2))
    return linear(h, policy.head)


def action_probs(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def input_tokens(model: AdaPerceiver, images, batch_size: int = 250) -> np.ndarray:
    images = model._as_images(images)
    with no_record():
        return np.concatenate([model.patch_embed(images[sl]).data for sl in _batches(len(images), batch_size)], axis=0)


def ce_table(model: AdaPerceiver, images, labels, token_choices: Sequence[int], batch_size: int = 250) -> np.ndarray:
    """Cross-entropy ``[N, |T|]`` of each input at ``(t, max w, L)`` for each action ``t``."""
    mc = model.config
    cfgs = [ConfigTuple(int(t), max(mc.widths), mc.depth) for t in token_choices]
    logits = evaluate_grid(model, images, cfgs, batch_size)
    labels = np.asarray(labels)
    cols = []
    for c in cfgs:
        z = logits[c].astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        cols.append(-logp[np.arange(len(labels)), labels])
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------- REINFORCE


@dataclass
class Reinforce:
    """REINFORCE state: optimiser plus the EMA reward baseline."""

    policy: PolicyNet
    lr: float = 1e-3
    beta: float = 0.9
    baseline: float = 0.0
    entropy_coef: float = 0.0
    updates: int = 0

    def __post_init__(self):
        from .training import AdamW

        self.opt = AdamW(self.policy.params, weight_decay=0.0)


def reinforce_update(
    state: Reinforce,
    tokens: np.ndarray,
    rewards_for,
    lam: float,
    rng: np.random.Generator,
) -> dict:
    """One policy-gradient step.

    ``rewards_for(actions)`` returns the negative cross-entropy of each input
    under its sampled action index; the cost term ``-lam * index`` is added here.
    The advantage uses the baseline from before this batch; the baseline
    then moves to ``beta * baseline + (1 - beta) * mean_reward``.
    """
    if lam < 0:
        raise InvalidConfig("lambda must be nonnegative")
    policy = state.policy
    for p in policy.parameters():
        p.grad = None
    with Tape() as tape:
        logits = policy_net_forward(policy, tokens)
        probs = action_probs(logits.data)
        cum = probs.cumsum(axis=1)
        u = rng.random(len(probs))
        actions = np.minimum((u[:, None] >= cum).sum(axis=1), probs.shape[1] - 1)
        reward = -np.asarray(rewards_for(actions), dtype=np.float64) - lam * actions
        advantage = reward - state.baseline
        nll = cross_entropy(logits, actions)  # -log pi(a|x)
        loss = mean(mul(nll, Tensor(advantage.astype(logits.dtype))))
        if state.entropy_coef:
            ent = None
            for a in range(probs.shape[1]):
                term = mul(cross_entropy(logits, np.full(len(probs), a)), Tensor(probs[:, a].astype(logits.dtype)))
                ent = term if ent is None else add(ent, term)
            loss = add(loss, mul(mean(ent), -state.entropy_coef))
    backward(loss, tape, leaves=policy.parameters())
    state.opt.step(state.lr)
    mean_reward = float(reward.mean())
    state.baseline = state.beta * state.baseline + (1.0 - state.beta) * mean_reward
    state.updates += 1
    entropy = float(-(probs * np.log(np.clip(probs, 1e-300, None))).sum(axis=1).mean())
    return {"mean_reward": mean_reward, "entropy": entropy, "baseline": state.baseline, "actions": actions}


def train_policy(
    model: AdaPerceiver,
    split: Split,
    policy: PolicyNet,
    epochs: int = 5,
    batch_size: int = 64,
    lam: float = 0.1,
    lr: float = 1e-3,
    beta: float = 0.9,
    baseline_init: float = 0.0,
    entropy_coef: float = 0.0,
    seed: int = 0,
    table: np.ndarray | None = None,
) -> tuple[Reinforce, list[dict]]:
    """Train ``policy`` against the frozen ``model``; returns the state and per-epoch summaries.

    Rewards come from a precomputed cross-entropy table (computed here if
    not given), which equals running ``forward_config`` per sampled action.
    """
    tokens = input_tokens(model, split.images)
    if table is None:
        table = ce_table(model, split.images, split.labels, policy.token_choices)
    state = Reinforce(policy, lr=lr, beta=beta, baseline=baseline_init, entropy_coef=entropy_coef)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(split))
        rewards, baselines = [], []
        for i in range(0, len(order) - batch_size + 1, batch_size):
            idx = order[i : i + batch_size]
            m = reinforce_update(state, tokens[idx], lambda a, idx=idx: table[idx, a], lam, rng)
            rewards.append(m["mean_reward"])
            baselines.append(m["baseline"])
        history.append({"epoch": epoch, "mean_reward": float(np.mean(rewards)), "ema_reward": baselines[-1], "first_ema": baselines[0]})
    return state, history


def rl_choose(model: AdaPerceiver, policy: PolicyNet, images) -> np.ndarray:
    """Greedy token count per input."""
    tokens = input_tokens(model, images)
    with no_record():
        logits = policy_net_forward(policy, tokens).data
    return np.asarray(policy.token_choices)[logits.argmax(axis=1)]


# ---------------------------------------------------------------- oracle


@dataclass
class OracleEntry:
    config: ConfigTuple
    correct: bool


def oracle_build(model: AdaPerceiver, split: Split, configs: Sequence[ConfigTuple], batch_size: int = 250) -> dict:
    """Map input id to its cheapest correct config; max-flops config (counted wrong) when none is correct."""
    if not configs:
        raise InvalidConfig("oracle needs at least one config")
    configs = list(dict.fromkeys(configs))
    logits = evaluate_grid(model, split.images, configs, batch_size)
    flops = np.array([config_flops(model, c) for c in configs], dtype=np.int64)
    by_cost = np.argsort(flops, kind="stable")
    correct = np.stack([logits[c].argmax(axis=1) == split.labels for c in configs], axis=1)
    fallback = configs[int(by_cost[-1])]
    table = {}
    for i in range(len(split)):
        hits = by_cost[correct[i, by_cost]]
        table[i] = OracleEntry(configs[int(hits[0])], True) if len(hits) else OracleEntry(fallback, False)
    return table


def oracle_to_json(table: dict) -> str:
    data = {str(k): {"t": e.config.t, "w": e.config.w, "l": e.config.l, "correct": e.correct} for k, e in table.items()}
    return json.dumps(data, sort_keys=False, indent=None, separators=(",", ":")) + "\n"


def oracle_from_json(text: str) -> dict:
    raw = json.loads(text)
    return {int(k): OracleEntry(ConfigTuple(v["t"], v["w"], v["l"]), bool(v["correct"])) for k, v in raw.items()}


# ---------------------------------------------------------------- replay


def policy_label(kind: str, params: dict) -> str:
    if kind == "baseline":
        return f"Baseline (t={params['t']}, w={params.get('w', '-')}, l={params.get('l', '-')})"
    if kind == "ee":
        return f"EE (t={params['t']}, tau={params['tau']})"
    if kind == "rl":
        return "RL (tokens)"
    if kind == "rl_ee":
        return f"RL (tokens, tau={params['tau']})"
    return "Optimal"


def run_policy(kind: str, split: Split, model: AdaPerceiver, params: dict | None = None, batch_size: int = 250) -> PolicyResult:
    """Replay a policy over ``split``; records carry the config used per input."""
    params = dict(params or {})
    mc = model.config
    if kind not in POLICY_KINDS:
        raise UnknownPolicy(f"unknown policy {kind!r}; expected one of {POLICY_KINDS}")
    records = []
    if kind == "baseline":
        cfg = ConfigTuple(int(params.get("t", max(mc.token_grans))), int(params.get("w", max(mc.widths))), int(params.get("l", mc.depth)))
        params.update(t=cfg.t, w=cfg.w, l=cfg.l)
        logits = evaluate_grid(model, split.images, [cfg], batch_size)[cfg]
        conf = softmax_confidence(logits)
        fl = config_flops(model, cfg)
        for i, (z, y) in enumerate(zip(logits, split.labels)):
            records.append(EvalRecord(i, cfg, bool(z.argmax() == y), float(conf[i]), fl))
    elif kind == "ee":
        t, w = int(params.get("t", max(mc.token_grans))), int(params.get("w", max(mc.widths)))
        res = early_exit_infer(model, split.images, t, float(params["tau"]), w, batch_size=batch_size)
        for i in range(len(split)):
            records.append(EvalRecord(i, ConfigTuple(t, w, int(res.exit_depths[i])), bool(res.predictions[i] == split.labels[i]), float(res.confidence[i]), int(res.flops[i])))
    elif kind in ("rl", "rl_ee"):
        policy: PolicyNet = params["policy"]
        w = max(mc.widths)
        choice = rl_choose(model, policy, split.images)
        extra = policy.flops() if params.get("include_policy_cost", True) else 0
        for t in sorted(set(choice.tolist())):
            idx = np.flatnonzero(choice == t)
            sub = Split(split.images[idx], split.labels[idx])
            if kind == "rl":
                r = run_policy("baseline", sub, model, {"t": t, "w": w, "l": mc.depth}, batch_size).records
            else:
                r = run_policy("ee", sub, model, {"t": t, "w": w, "tau": params["tau"]}, batch_size).records
            for j, rec in zip(idx, r):
                records.append(EvalRecord(int(j), rec.config, rec.correct, rec.confidence, rec.flops + extra))
        records.sort(key=lambda r: r.input_id)
    else:
        table = params.get("table")
        if table is None:
            table = oracle_build(model, split, params["configs"], batch_size)
        for i in range(len(split)):
            e = table[i]
            records.append(EvalRecord(i, e.config, e.correct, float("nan"), config_flops(model, e.config)))
    return PolicyResult.from_records(policy_label(kind, params), records)


# ---------------------------------------------------------------- dumps


def write_records(path, records: Sequence[EvalRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.row())
    return path


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EvalRecord(int(r["input_id"]), ConfigTuple(int(r["t"]), int(r["w"]), int(r["l"])), r["correct"] == "1", float(r["confidence"]), int(r["flops"]))
        for r in rows
    ]


def write_policy_table(path, results: Sequence[PolicyResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("policy", "accuracy", "gflops"))
        for r in results:
            w.writerow((r.policy, repr(100.0 * r.accuracy), repr(r.gflops)))
    return path
