"""Command-line driver: ``adaperceiver {train,eval,policy,oracle,flops,gradcheck,selftest}``.

Experiments are described by a JSON file; ``adaperceiver --dump-config``
prints the full default document. Fields:

``seed``        int, seeds model init, training RNG and (unless set) the dataset
``model``       ModelConfig fields
``training``    TrainConfig fields; ``schedule`` is a list of {stage, epochs, lr}
``dataset``     {"name": "synthetic" | "idx", ...} as accepted by ``ingest_dataset``
``policies``    list of {"kind": baseline|ee|rl|rl_ee, ...} replayed by ``policy``
``output_dir``  default output directory

The thread count of the numeric backend can be capped with
``ADAPERCEIVER_THREADS`` or ``--threads``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import costmodel
from .data import Split, ingest_dataset
from .errors import AdaPerceiverError
from .model import AdaPerceiver, ConfigTuple, ModelConfig, load_checkpoint
from .policy import (
    EvalRecord,
    PolicyNet,
    PolicyResult,
    evaluate_grid,
    oracle_build,
    oracle_to_json,
    pareto_flags,
    run_policy,
    softmax_confidence,
    train_policy,
    write_records,
)
from .training import TrainConfig, accuracy, extreme_configs, train

THREADS_ENV = "ADAPERCEIVER_THREADS"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- experiment config


def default_policies() -> list:
    return [
        {"kind": "baseline", "t": 8},
        {"kind": "baseline", "t": 32},
        {"kind": "ee", "t": 32, "tau": 0.9},
        {"kind": "ee", "t": 32, "tau": 0.95},
        {"kind": "rl", "lam": 0.05, "epochs": 3, "n_train": 4000},
        {"kind": "rl_ee", "lam": 0.05, "epochs": 3, "n_train": 4000, "tau": 0.9},
    ]


def default_dataset() -> dict:
    return {"name": "synthetic", "n_train": 20000, "n_val": 1000, "n_test": 2000, "seed": 0, "noise_levels": [0.1]}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: ModelConfig().to_dict())
    training: dict = field(default_factory=lambda: TrainConfig().to_dict())
    dataset: dict = field(default_factory=default_dataset)
    policies: list = field(default_factory=default_policies)
    output_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model).validate()

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig.from_dict(dict(self.training))
        cfg.seed = self.seed
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        model = {**base.model, **raw.get("model", {})}
        training = {**base.training, **raw.get("training", {})}
        dataset = raw.get("dataset", base.dataset)
        return cls(
            seed=int(raw.get("seed", base.seed)),
            model=model,
            training=training,
            dataset=dataset,
            policies=raw.get("policies", base.policies),
            output_dir=raw.get("output_dir", base.output_dir),
        )


def _experiment_for(args, checkpoint: Path | None = None) -> ExperimentConfig:
    if getattr(args, "config", None):
        return ExperimentConfig.load(args.config)
    if checkpoint is not None and (checkpoint.parent / "experiment.json").exists():
        return ExperimentConfig.load(checkpoint.parent / "experiment.json")
    return ExperimentConfig()


def _load_model(args) -> tuple[AdaPerceiver, Path]:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    model, _, _ = load_checkpoint(path)
    return model, path


def _split(exp: ExperimentConfig, name: str, limit: int | None) -> Split:
    ds = ingest_dataset(exp.dataset)
    split = getattr(ds, name)
    return split.subset(limit) if limit else split


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _num(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- grid evaluation

PARETO_COLUMNS = ("config", "t", "w", "l", "accuracy", "flops", "pareto")


@dataclass
class ParetoRow:
    id: str
    accuracy: float
    mean_flops: float
    extra: dict = field(default_factory=dict)


def aggregate_records(records) -> dict:
    """``{config: (accuracy, mean_flops)}`` recomputed from per-input records."""
    groups: dict = {}
    for r in records:
        groups.setdefault(r.config, []).append(r)
    out = {}
    for cfg, rs in groups.items():
        out[cfg] = (sum(r.correct for r in rs) / len(rs), sum(r.flops for r in rs) / len(rs))
    return out


def pareto_rows(records) -> list[tuple]:
    agg = aggregate_records(records)
    items = sorted(agg.items(), key=lambda kv: (kv[1][1], kv[0].t, kv[0].w, kv[0].l))
    flags = pareto_flags([a for _, (a, _) in items], [f for _, (_, f) in items])
    return [(c.label(), c.t, c.w, c.l, _num(a), _num(f), int(p)) for (c, (a, f)), p in zip(items, flags)]


def eval_grid(model: AdaPerceiver, split: Split, configs, batch_size: int = 250) -> tuple[list[ParetoRow], list[EvalRecord]]:
    """Evaluate each config once; rows sorted by flops with a Pareto flag in ``extra``."""
    logits = evaluate_grid(model, split.images, configs, batch_size)
    records = []
    for cfg in configs:
        z = logits[cfg]
        conf = softmax_confidence(z)
        fl = costmodel.flops_forward(cfg, model.config).total
        correct = z.argmax(axis=1) == split.labels
        records.extend(EvalRecord(i, cfg, bool(correct[i]), float(conf[i]), fl) for i in range(len(split)))
    rows = [
        ParetoRow(r[0], float(r[4]), float(r[5]), {"t": r[1], "w": r[2], "l": r[3], "pareto": bool(r[6])})
        for r in pareto_rows(records)
    ]
    return rows, records


def _grid(model: AdaPerceiver, args, depth_default) -> list[ConfigTuple]:
    mc = model.config
    ts = args.tokens or list(mc.token_grans)
    ws = args.widths or list(mc.widths)
    ls = args.depths or depth_default
    return [ConfigTuple(t, w, l).validate(mc) for t in ts for w in ws for l in ls]


# ---------------------------------------------------------------- subcommands


def cmd_train(args) -> int:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp.seed = args.seed
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n")
    ds = ingest_dataset(exp.dataset)
    model = AdaPerceiver(exp.model_config(), seed=exp.seed)
    if args.resume and not Path(args.resume).exists():
        raise UsageError(f"resume checkpoint {args.resume} does not exist")
    result = train(model, ds, exp.train_config(), out_dir=out, resume=args.resume, log_every=args.log_every)
    if result.checkpoints:
        shutil.copyfile(result.checkpoints[-1], out / "final.npz")
    rows = []
    for cfg in extreme_configs(model):
        acc = accuracy(model, ds.test, cfg)
        rows.append((cfg.label(), _num(acc)))
        print(f"test accuracy {cfg.label()}: {acc:.4f}")
    _write_csv(out / "test.csv", ("config", "accuracy"), rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, ckpt = _load_model(args)
    exp = _experiment_for(args, ckpt)
    split = _split(exp, args.split, args.limit)
    configs = _grid(model, args, [model.config.depth])
    _, records = eval_grid(model, split, configs)
    out = Path(args.out)
    write_records(out / "records.csv", records)
    rows = pareto_rows(records)
    _write_csv(out / "pareto.csv", PARETO_COLUMNS, rows)
    for r in rows:
        print(f"{r[0]:<14} accuracy {r[4]:<20} flops {r[5]:<16} {'pareto' if r[6] else ''}".rstrip())
    return EXIT_OK


def exit_histogram(records) -> str:
    counts = Counter(r.config.l for r in records)
    return " ".join(f"{l}:{counts[l]}" for l in sorted(counts))


def _write_policy_table(path: Path, results: list[PolicyResult]) -> None:
    rows = [
        (r.policy, _num(100.0 * r.accuracy), _num(r.gflops), exit_histogram(r.records) if "tau" in r.policy else "")
        for r in results
    ]
    _write_csv(path, ("policy", "accuracy", "gflops", "exit_histogram"), rows)


def _slug(i: int, label: str) -> str:
    keep = "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")
    while "__" in keep:
        keep = keep.replace("__", "_")
    return f"{i:02d}_{keep}"


def cmd_policy(args) -> int:
    model, ckpt = _load_model(args)
    exp = _experiment_for(args, ckpt)
    ds = ingest_dataset(exp.dataset)
    split = getattr(ds, args.split)
    if args.limit:
        split = split.subset(args.limit)
    mc = model.config
    out = Path(args.out)
    results = []
    for i, spec in enumerate(exp.policies):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        if kind in ("rl", "rl_ee"):
            policy = PolicyNet(mc.dim, mc.num_patches, mc.token_grans, seed=exp.seed, dtype=model.dtype)
            train_split = ds.train.subset(int(spec.get("n_train", 4000)))
            train_policy(
                model, train_split, policy,
                epochs=int(spec.get("epochs", 3)), lam=float(spec.get("lam", 0.05)),
                lr=float(spec.get("lr", 1e-3)), seed=exp.seed,
            )
            params = {"policy": policy}
            if kind == "rl_ee":
                params["tau"] = float(spec["tau"])
        else:
            params = spec
        res = run_policy(kind, split, model, params)
        results.append(res)
        write_records(out / "records" / f"{_slug(i, res.policy)}.csv", res.records)
        print(f"{res.policy:<36} accuracy {100 * res.accuracy:6.2f}%  GFLOPs {res.gflops:.6f}")
    _write_policy_table(out / "policy.csv", results)
    return EXIT_OK


def cmd_oracle(args) -> int:
    model, ckpt = _load_model(args)
    exp = _experiment_for(args, ckpt)
    split = _split(exp, args.split, args.limit)
    configs = _grid(model, args, list(model.config.depths))
    table = oracle_build(model, split, configs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(oracle_to_json(table))
    res = run_policy("oracle", split, model, {"table": table})
    write_records(out / "records.csv", res.records)
    _write_policy_table(out / "policy.csv", [res])
    print(f"{res.policy:<36} accuracy {100 * res.accuracy:6.2f}%  GFLOPs {res.gflops:.6f}")
    return EXIT_OK


def cmd_flops(args) -> int:
    if args.preset:
        report = costmodel.preset_flops(args.preset, args.tokens, args.width, args.depth)
    else:
        model, _ = _load_model(args)
        mc = model.config
        cfg = ConfigTuple(args.tokens or max(mc.token_grans), args.width or max(mc.widths), args.depth or mc.depth)
        report = costmodel.flops_forward(cfg, mc, args.outputs)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .selftest import gradcheck_joint_loss

    err = gradcheck_joint_loss(seed=args.seed, eps=args.eps, max_entries=args.max_entries)
    ok = err <= args.tolerance
    print(f"gradcheck max relative error {err:.3e} (tolerance {args.tolerance:g}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_selftest(args) -> int:
    from .selftest import results_csv, run_selftest

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} value {r.value:.3e}  tolerance {r.tolerance:g}", flush=True)

    results = run_selftest(seed=args.seed, names=args.only, progress=show)
    text = results_csv(results)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "selftest.csv", "w", newline="") as fh:
            fh.write(text)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaperceiver", description="Adaptive Perceiver experiments on the CPU.")
    p.add_argument("--dump-config", action="store_true", help="print the default experiment config as JSON and exit")
    p.add_argument("--threads", type=int, default=None, help=f"cap numeric threads (also ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", help="train a model with the stage schedule")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="stage checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=0)

    def eval_like(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.add_argument("--limit", type=int, help="use only the first N inputs")

    e = sub.add_parser("eval", help="evaluate a configuration grid; writes pareto.csv and records.csv")
    eval_like(e)
    o = sub.add_parser("oracle", help="build the oracle table; writes oracle.json, policy.csv and records.csv")
    eval_like(o)
    for sp in (e, o):
        sp.add_argument("--tokens", type=int, nargs="+")
        sp.add_argument("--widths", type=int, nargs="+")
        sp.add_argument("--depths", type=int, nargs="+")
    pol = sub.add_parser("policy", help="replay the configured policies; writes policy.csv and records/")
    eval_like(pol)

    f = sub.add_parser("flops", help="print a FLOPs report")
    f.add_argument("--preset", choices=sorted(costmodel.PRESETS))
    f.add_argument("--checkpoint")
    f.add_argument("--tokens", type=int)
    f.add_argument("--width", type=int)
    f.add_argument("--depth", type=int)
    f.add_argument("--outputs", type=int, default=1, help="output tokens (checkpoint mode)")

    g = sub.add_parser("gradcheck", help="finite-difference check of the joint loss at toy size")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-3)
    g.add_argument("--max-entries", type=int, default=None, help="sample this many entries per parameter")
    g.add_argument("--tolerance", type=float, default=1e-3)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--only", nargs="+")
    return p


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "policy": cmd_policy,
    "oracle": cmd_oracle,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def _thread_limit(args):
    n = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        print(json.dumps(ExperimentConfig().to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("adaperceiver: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        limiter = _thread_limit(args)
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as e:
        print(f"adaperceiver {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AdaPerceiverError as e:
        print(f"adaperceiver {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ValueError) else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
