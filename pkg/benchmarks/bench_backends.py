"""Benchmark the compiled recurrent kernels against the pure-numpy fallback.

Runs the hot path (one objective-plus-gradient step on a 100-step window,
reference architecture) under the active backend; without ``--single`` it
re-invokes itself with ``SCEVAE_PURE_PYTHON=1`` and prints the comparison.

Usage: python benchmarks/bench_backends.py [--steps N] [--single]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def measure(steps: int) -> dict[str, float]:
    from scevae._kernels import backend
    from scevae.scevae_core import ElboConfig, ScevaeParams, elbo_and_grad

    rng = np.random.default_rng(0)
    T = 100
    params = ScevaeParams.init(seed=0)
    cfg = ElboConfig()
    x = rng.standard_normal((T, 1))
    w = rng.standard_normal(T)
    y = rng.standard_normal(T)
    elbo_and_grad(params, cfg, x, w, y, np.random.default_rng(1))  # warm up
    start = time.perf_counter()
    for i in range(steps):
        elbo_and_grad(params, cfg, x, w, y, np.random.default_rng(i))
    elapsed = time.perf_counter() - start
    return {"backend": backend(), "steps": steps, "seconds": elapsed,
            "per_step_ms": 1e3 * elapsed / steps}


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=30)
    parser.add_argument("--single", action="store_true",
                        help="measure only the active backend")
    args = parser.parse_args()

    result = measure(args.steps)
    print(f"{result['backend']:>8}: {result['per_step_ms']:8.2f} ms/step "
          f"({result['steps']} gradient steps, {result['seconds']:.2f} s)")
    if args.single or result["backend"] == "python":
        return 0

    env = dict(os.environ, SCEVAE_PURE_PYTHON="1")
    proc = subprocess.run(
        [sys.executable, __file__, "--steps", str(args.steps), "--single"],
        env=env, capture_output=True, text=True, check=True,
    )
    print(proc.stdout, end="")
    py_ms = float(proc.stdout.split(":")[1].split("ms")[0])
    print(f"speedup: {py_ms / result['per_step_ms']:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
