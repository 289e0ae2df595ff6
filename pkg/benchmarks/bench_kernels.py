"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each backend runs in its own interpreter because the choice is fixed at
import time. Prints one row per (kernel, shape) with both timings and the
speed-up.
"""
import argparse
import json
import os
import subprocess
import sys

SHAPES = [(16, 8, 16), (64, 64, 64), (256, 64, 128), (1024, 128, 256)]  # (batch, in, out)

_WORKER = r"""
import json, sys, timeit
import numpy as np
from deidkit import kernels
shapes, repeat = json.loads(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
out = {"backend": kernels.BACKEND, "rows": []}
for n, d_in, d_out in shapes:
    W = rng.standard_normal((d_out, d_in)); b = rng.standard_normal(d_out)
    x = rng.standard_normal((n, d_in))
    y = kernels.dense_forward(W, b, x, 1); dy = rng.standard_normal(y.shape)
    m = np.zeros_like(W); v = np.zeros_like(W); p = W.copy(); g = rng.standard_normal(W.shape)
    cases = {
        "dense_forward": lambda: kernels.dense_forward(W, b, x, 1),
        "dense_backward": lambda: kernels.dense_backward(W, x, y, dy, 1),
        "adam_update": lambda: kernels.adam_update(p, g, m, v, 0.9, 0.999, 1e-3, 1e-8),
    }
    for name, fn in cases.items():
        t = timeit.Timer(fn)
        loops, _ = t.autorange()
        best = min(t.repeat(repeat, loops)) / loops
        out["rows"].append({"kernel": name, "shape": [n, d_in, d_out], "seconds": best})
print(json.dumps(out))
"""


def run(backend, repeat):
    env = dict(os.environ, DEIDKIT_BACKEND=backend)
    res = subprocess.run(
        [sys.executable, "-c", _WORKER, json.dumps(SHAPES), str(repeat)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast = run("cython", args.repeat)
    slow = run("python", args.repeat)
    if fast["backend"] != "cython":
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
        return 1
    print(f"{'kernel':<15} {'batch x in x out':>17} {'cython us':>10} {'python us':>10} {'speed-up':>9}")
    for a, b in zip(fast["rows"], slow["rows"]):
        shape = "x".join(map(str, a["shape"]))
        print(f"{a['kernel']:<15} {shape:>17} {a['seconds'] * 1e6:10.1f} {b['seconds'] * 1e6:10.1f} "
              f"{b['seconds'] / a['seconds']:8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
