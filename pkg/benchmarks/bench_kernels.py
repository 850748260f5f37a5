"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]

Times each hot kernel on attention- and FFN-sized arrays, then one full
training step of the default model under each backend.
"""

import argparse
import timeit

import numpy as np

from adaperceiver import kernels
from adaperceiver.model import AdaPerceiver, ModelConfig
from adaperceiver.training import AdamW, TrainStage, train_step


def kernel_cases(batch: int, rng: np.random.Generator):
    scores = rng.normal(size=(batch, 4, 32, 32)).astype(np.float32)
    mask = np.tril(np.ones((32, 32), dtype=np.uint8))
    probs = kernels.NumpyBackend.softmax_fwd(scores, mask)
    x = rng.normal(size=(batch, 32, 64)).astype(np.float32)
    gain, bias = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = kernels.NumpyBackend.layernorm_fwd(x, gain, bias, 1e-6)
    h = rng.normal(size=(batch, 32, 164)).astype(np.float32)
    return {
        "softmax_fwd": lambda b: b.softmax_fwd(scores, mask),
        "softmax_bwd": lambda b: b.softmax_bwd(probs, scores),
        "layernorm_fwd": lambda b: b.layernorm_fwd(x, gain, bias, 1e-6),
        "layernorm_bwd": lambda b: b.layernorm_bwd(x, xhat, rstd, gain),
        "gelu_fwd": lambda b: b.gelu_fwd(h),
        "gelu_bwd": lambda b: b.gelu_bwd(h, h),
    }


def time_train_step(name: str, batch: int, repeat: int) -> float:
    kernels.use_backend(name)
    model = AdaPerceiver(ModelConfig(), seed=0)
    opt = AdamW(model.params)
    rng = np.random.default_rng(0)
    images = rng.normal(size=(batch, 1, 28, 28)).astype(np.float32)
    labels = rng.integers(0, 10, size=batch)
    stage = TrainStage("all")
    train_step(model, opt, images, labels, stage, rng, 1e-3)  # warm-up
    return min(timeit.repeat(lambda: train_step(model, opt, images, labels, stage, rng, 1e-3), number=1, repeat=repeat))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    if "compiled" not in names:
        print("compiled extension not built; only the numpy fallback is available")
    previous = kernels.backend.name
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}" + "".join(f"{n + ' (ms)':>16}" for n in names) + f"{'speedup':>10}")
    for kname, fn in kernel_cases(args.batch, rng).items():
        ms = {}
        for n in names:
            b = kernels.BACKENDS[n]
            ms[n] = 1e3 * min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        speed = ms["numpy"] / ms["compiled"] if "compiled" in ms else float("nan")
        print(f"{kname:<16}" + "".join(f"{ms[n]:>16.3f}" for n in names) + f"{speed:>10.2f}")

    steps = {n: 1e3 * time_train_step(n, args.batch, max(3, args.repeat // 5)) for n in names}
    speed = steps["numpy"] / steps["compiled"] if "compiled" in steps else float("nan")
    print(f"{'train_step':<16}" + "".join(f"{steps[n]:>16.1f}" for n in names) + f"{speed:>10.2f}")
    kernels.use_backend(previous)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
