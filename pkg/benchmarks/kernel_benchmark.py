"""Benchmark the compiled kernel backend against the pure-numpy fallback.

Times the hot kernels (recurrent cell forward/backward, banded attention)
in isolation and one full teacher-forced training step end to end.

    python benchmarks/kernel_benchmark.py [--batch 64] [--steps 40] [--repeat 30]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_kernels(mod, B, T, d_in, dh, dk, dx, w, repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(B, T, d_in))
    wx = rng.normal(size=(d_in, 3 * dh)) * 0.3
    wh = rng.normal(size=(dh, 3 * dh)) * 0.3
    b = rng.normal(size=3 * dh) * 0.1
    h0 = np.zeros((B, dh))
    H, R, U, C = mod.gru_forward(x, wx, wh, b, h0)
    dH = rng.normal(size=(B, T, dh))
    A = rng.normal(size=(B, T, dk))
    K = rng.normal(size=(B, T, dk))
    X = rng.normal(size=(B, T, dx))
    S = mod.band_scores_fwd(A, K, w)
    alpha = mod.band_softmax_fwd(S, w)
    dR = rng.normal(size=(B, T, dx))

    rows = {
        "gru_forward": _time(lambda: mod.gru_forward(x, wx, wh, b, h0), repeat),
        "gru_backward": _time(lambda: mod.gru_backward(x, wx, wh, h0, H, R, U, C, dH), repeat),
        "band_scores": _time(lambda: mod.band_scores_fwd(A, K, w), repeat),
        "band_softmax": _time(lambda: mod.band_softmax_fwd(S, w), repeat),
        "band_wsum": _time(lambda: mod.band_wsum_fwd(alpha, X), repeat),
        "band_wsum_bwd": _time(lambda: mod.band_wsum_bwd(alpha, X, dR), repeat),
    }
    return rows


def bench_training_step(B, T, repeat):
    from cda import autodiff as ad
    from cda import model as M
    from cda import train as cda_train

    rng = np.random.default_rng(1)
    cfg = M.ModelConfig(d_x=4, K=4, d_h=32, d_k=8, window=12, seed=0)
    model = M.CdaModel(cfg)
    batch = (
        rng.normal(size=(B, T, 4)),
        rng.integers(0, 4, size=(B, T)),
        rng.normal(size=(B, T)),
        np.zeros((B, 0)),
    )
    tcfg = cda_train.TrainConfig(epochs=1, batch_size=B, lam=1.0, horizon=6, seed=0)

    def step():
        loss, *_ = cda_train.build_step_objective(model, batch, batch, tcfg, lam_eff=1.0)
        ad.zero_grad(model.all_parameters())
        ad.backward(loss)

    return _time(step, max(repeat // 3, 3))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()

    from cda import kernels

    impls = kernels.available_backends()
    print(f"backends available: {', '.join(impls)} (selected: {kernels.BACKEND})")
    B, T = args.batch, args.steps
    results = {
        name: bench_kernels(mod, B, T, d_in=9, dh=32, dk=8, dx=4, w=12, repeat=args.repeat)
        for name, mod in impls.items()
    }
    names = list(next(iter(results.values())))
    print(f"\nkernel timings, batch={B} x T={T} (ms per call)")
    header = f"{'kernel':<16}" + "".join(f"{n:>12}" for n in results)
    if len(results) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for k in names:
        row = f"{k:<16}" + "".join(f"{results[n][k] * 1e3:>12.3f}" for n in results)
        if len(results) == 2:
            row += f"{results['python'][k] / results['cython'][k]:>9.1f}x"
        print(row)

    print("\nend-to-end training step (forward + backward, ms)")
    step_times = {}
    for name in impls:
        # fresh subprocess per backend: selection happens at import time
        code = (
            "from benchmarks.kernel_benchmark import bench_training_step;"
            f"print(bench_training_step({B}, {T}, {args.repeat}))"
        )
        env = {**os.environ, "CDA_KERNELS": name, "PYTHONPATH": os.getcwd()}
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        step_times[name] = float(out.stdout.strip().splitlines()[-1])
        print(f"  {name:<8} {step_times[name] * 1e3:10.1f}")
    if len(step_times) == 2:
        print(f"  speedup  {step_times['python'] / step_times['cython']:10.1f}x")


if __name__ == "__main__":
    main()
