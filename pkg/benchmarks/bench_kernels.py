"""Time the numba and numpy kernel paths on training-sized arrays.

    python benchmarks/bench_kernels.py [--repeat N]

Also times a few full training steps of the default model under each setting
of ``TAT_USE_NUMBA`` (the flag is read at import, so those run in
subprocesses).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tat import _kernels as k

# batch 32 x heads 4 x tokens 101 attention rows; 32 x 101 tokens of width 64 / 256
SHAPES = {"softmax": (32 * 4 * 101, 101), "layer_norm": (32 * 101, 64), "gelu": (32 * 101, 256)}

STEP_CODE = """
import json, time
from tat.data import SyntheticConfig, generate_synthetic
from tat.train import TrainConfig, train
s, _ = generate_synthetic(SyntheticConfig(source_cn=40, source_mci=40, target_cn=10, target_mci=10, target_lbd=10))
for n in (2, 2 + {steps}):
    t0 = time.perf_counter()
    train(TrainConfig(total_steps=n, warmup_steps=1, dtype="{dtype}"), s)
    dt = time.perf_counter() - t0
    if n == 2:
        base = dt
print(json.dumps((dt - base) / {steps}))
"""


def kernel_cases(rng):
    x = rng.standard_normal(SHAPES["softmax"])
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    ln = rng.standard_normal(SHAPES["layer_norm"])
    gain, bias = np.ones(ln.shape[1]), np.zeros(ln.shape[1])
    _, xhat, rstd = k._layer_norm_fwd_np(ln, gain, bias, 1e-5)
    g = rng.standard_normal(SHAPES["gelu"])
    t = np.tanh(k._gelu_inner_np(g))
    return {
        "softmax_shift": (x,),
        "softmax_normalize": (e,),
        "softmax_bwd": (y, x),
        "layer_norm_fwd": (ln, gain, bias, 1e-5),
        "layer_norm_bwd": (ln, xhat, rstd, gain),
        "gelu_inner": (g,),
        "gelu_out": (g, t),
        "gelu_bwd": (g, t, g),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, inputs in kernel_cases(rng).items():
        f_np, f_nb = getattr(k, f"_{name}_np"), getattr(k, f"_{name}_nb")
        f_nb(*[a.copy() if isinstance(a, np.ndarray) else a for a in inputs])  # compile
        times = []
        for f in (f_np, f_nb):
            copies = [a.copy() if isinstance(a, np.ndarray) else a for a in inputs]
            times.append(min(timeit.repeat(lambda: f(*copies), number=1, repeat=args.repeat)) * 1e3)
        print(f"{name:<20}{times[0]:>10.3f}{times[1]:>10.3f}{times[0] / times[1]:>8.2f}x")

    print(f"\n{'train step':<20}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for dtype in ("float64", "float32"):
        per_step = []
        for flag in ("0", "1"):
            env = {**os.environ, "TAT_USE_NUMBA": flag}
            code = STEP_CODE.format(steps=args.steps, dtype=dtype)
            out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
            per_step.append(json.loads(out.stdout))
        print(f"{dtype:<20}{per_step[0]:>10.3f}{per_step[1]:>10.3f}{per_step[0] / per_step[1]:>8.2f}x")


if __name__ == "__main__":
    main()
