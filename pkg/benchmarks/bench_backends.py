#!/usr/bin/env python3
"""Compare the compiled kernel backend against the NumPy fallback.

Micro-benchmarks time each hot kernel at the shapes the benchmark model
actually uses; the macro benchmark times whole training steps.  Run after
an editable install:

    python benchmarks/bench_backends.py [--steps 30]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from queryformer import kernels
from queryformer.detect import DetectionHead, HeadConfig
from queryformer.train import TrainConfig, train


def time_fn(fn, repeat: int = 200) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def micro_cases():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(12, 64))
    b = rng.normal(size=(336, 64))
    big = rng.normal(size=(256, 64))
    w = rng.normal(size=(64, 256))
    logits = rng.normal(size=(48, 336))
    gain = rng.normal(size=64)
    shift = rng.normal(size=64)
    boxes = rng.uniform(size=(12, 4))
    inv_freq = 10000.0 ** (-2.0 * np.arange(8) / 16)
    x64 = rng.normal(size=(256, 64))

    def case_gemm(k):
        k.gemm(big, w)

    def case_gemm_nt(k):
        k.gemm(a, b, tb=True)

    def case_softmax(k):
        k.softmax_fwd(logits)

    def case_softmax_bwd(k):
        y = k.softmax_fwd(logits)
        gx = np.zeros_like(logits)
        k.softmax_bwd_acc(gx, y, y)

    def case_layernorm(k):
        k.layernorm_fwd(x64, gain, shift, 1e-5)

    def case_sigmoid(k):
        k.sigmoid_fwd(x64)

    def case_relu(k):
        k.relu_fwd(x64)

    def case_sincos(k):
        k.box_sincos_fwd(boxes, inv_freq)

    return [
        ("gemm 256x64x256", case_gemm),
        ("gemm_nt 12x64 @ 336x64^T", case_gemm_nt),
        ("softmax 48x336", case_softmax),
        ("softmax_bwd 48x336", case_softmax_bwd),
        ("layernorm 256x64", case_layernorm),
        ("sigmoid 256x64", case_sigmoid),
        ("relu 256x64", case_relu),
        ("box_sincos 12 boxes", case_sincos),
    ]


def run_micro() -> None:
    backends = kernels.available()
    print(f"{'kernel':<28}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, case in micro_cases():
        times = {}
        for name in backends:
            k = kernels._BACKENDS[name]
            times[name] = time_fn(lambda: case(k))
        row = f"{label:<28}" + "".join(f"{times[n]:>12.1f}us" for n in backends)
        if "compiled" in times and "python" in times:
            row += f"{times['python'] / times['compiled']:>9.2f}x"
        print(row)


def run_macro(steps: int) -> None:
    cfg = HeadConfig(multiscale=True, feature_fusion=True, attention_prior=True, level_embed=True)
    results = {}
    for name in kernels.available():
        kernels.use(name)
        head = DetectionHead(cfg, seed=0)
        t0 = time.perf_counter()
        train(head, TrainConfig(steps=steps, batch_size=4, seed=0))
        results[name] = (time.perf_counter() - t0) / steps * 1e3
    kernels.use("compiled" if "compiled" in kernels.available() else "python")
    print(f"\nfull train step (multiscale benchmark preset, batch 4, {steps} steps):")
    for name, ms in results.items():
        print(f"  {name:<10} {ms:8.1f} ms/step")
    if "compiled" in results and "python" in results:
        print(f"  speedup    {results['python'] / results['compiled']:8.2f}x")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=30, help="macro benchmark steps per backend")
    args = parser.parse_args()
    print(f"available backends: {kernels.available()}")
    run_micro()
    run_macro(args.steps)


if __name__ == "__main__":
    main()
