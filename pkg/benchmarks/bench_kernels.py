#!/usr/bin/env python3
"""Benchmark the fused per-sample kernels: numba @njit vs the pure-numpy
fallback, with the tape autodiff as context.

Run:  python benchmarks/bench_kernels.py [--reps 200]
The numba path is what training uses by default; DPLORA_NUMBA=0 selects the
numpy fallback. Results are wall-clock per sample (forward+backward).
"""

import argparse
import time

import numpy as np

from dplora import kernels, model
from dplora import tensor as tz
from dplora.training import GradFn, ParamView


def setup(T: int, rank: int = 4):
    cfg = model.ModelConfig()
    params = model.init_params(cfg, seed=3)
    model.attach_lora(params, model.default_lora_targets(cfg), rank=rank, seed=1)
    packed = model.PackedModel(params)
    rng = np.random.default_rng(0)
    ids = rng.integers(4, cfg.vocab_size, size=T).astype(np.int64)
    y = (rng.random(cfg.n_labels) < 0.3).astype(np.float64)
    no_mlm = np.zeros(0, dtype=np.int64)
    args = (ids, y, packed.emb, packed.pos, packed.wq, packed.wk, packed.wv,
            packed.wo, packed.w1, packed.w2, packed.wc, packed.bc,
            packed.a_q, packed.b_q, packed.a_k, packed.b_k, packed.a_v,
            packed.b_v, packed.a_o, packed.b_o, packed.scale,
            cfg.n_heads, cfg.layer_norm_eps, no_mlm, no_mlm, 0.0)
    return cfg, params, ids, y, args


def time_fn(fn, reps: int) -> float:
    fn()  # warm (numba compiles here on first use)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def tape_once(params, ids, y):
    loss = model.traced_sample_loss(params, ids, y)
    for _, t in params.trainable_entries():
        t.zero_grad()
    tz.backward(loss)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=200)
    ap.add_argument("--tape-reps", type=int, default=20)
    args = ap.parse_args()

    print(f"numba available and enabled: {kernels.NUMBA_ENABLED}")
    print(f"{'T':>4s} {'njit ms':>9s} {'numpy ms':>9s} {'speedup':>8s} {'tape ms':>9s}")
    for T in (16, 32, 48, 64, 96):
        cfg, params, ids, y, kargs = setup(T)
        numpy_ms = time_fn(lambda: kernels.loss_grads_lora_py(*kargs), max(args.reps // 4, 10))
        if kernels.NUMBA_ENABLED:
            njit_ms = time_fn(lambda: kernels.loss_grads_lora_nb(*kargs), args.reps)
        else:
            njit_ms = float("nan")
        tape_ms = time_fn(lambda: tape_once(params, ids, y), args.tape_reps)
        speed = numpy_ms / njit_ms if njit_ms == njit_ms else float("nan")
        print(f"{T:4d} {njit_ms:9.3f} {numpy_ms:9.3f} {speed:7.1f}x {tape_ms:9.3f}")

    # one full training step at the default batch for a realistic view
    cfg, params, ids, y, _ = setup(48)
    view = ParamView(params)
    fn = GradFn(params, view)
    rng = np.random.default_rng(1)
    rows = np.stack([rng.integers(4, cfg.vocab_size, size=64) for _ in range(64)]).astype(np.int64)
    targets = (rng.random((64, cfg.n_labels)) < 0.3).astype(np.float64)
    step_ms = time_fn(lambda: fn(rows, targets), 5)
    print(f"\nper-sample grads, batch of 64 (T=64): {step_ms:.1f} ms/step "
          f"({step_ms / 64:.2f} ms/sample) on the selected backend")


if __name__ == "__main__":
    main()
