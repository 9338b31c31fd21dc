"""Time the compiled kernels against the numpy fallback.

Kernel-level timings call both implementations in one process. The
end-to-end row times a few conv training steps in two subprocesses, one with
``FLOWLAB_PURE_PYTHON=1``, so the backend is chosen the same way as in use.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from flowlab import _fallback

try:
    from flowlab import _kernels
except ImportError:  # pragma: no cover
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

TRAIN_SNIPPET = """
import time, numpy as np
from flowlab import kernels
from flowlab.datasets import gen_phantoms
from flowlab.models import ConditionedModel, ModelConfig
from flowlab.paths import PathSpec
from flowlab.training import TrainConfig, train
ds = gen_phantoms(128, size=16, seed=0)
m = ConditionedModel(ModelConfig((16, 16), channels=16, mask_conditioning=True))
t0 = time.perf_counter()
train(m, ds, TrainConfig(path=PathSpec.linear_ot(), epochs=1, batch_size=32, conditioning="mask"))
print(kernels.BACKEND, (time.perf_counter() - t0) / 4)
"""


def cases():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 16, 16, 16))
    cols = _fallback.im2col(x, 3, 1)
    a, b = rng.standard_normal((1000, 2)), rng.standard_normal((1000, 2))
    img = rng.standard_normal((256, 256))
    vals = rng.uniform(size=32 * 256)
    grid = np.linspace(-0.25, 1.25, 601)
    bw = [0.1, 0.2, 0.4, 0.8, 1.6]
    return [
        ("im2col 32x16x16x16 k3", lambda m: m.im2col(x, 3, 1)),
        ("col2im 32x16x16x16 k3", lambda m: m.col2im(cols, x.shape, 3, 1)),
        ("rbf_pair_sums 1000x1000 d=2", lambda m: m.rbf_pair_sums(a, b, bw, False)),
        ("rbf_pair_sums 256x256 d=256", lambda m: m.rbf_pair_sums(img, img, bw, True)),
        ("gaussian_kde 8192 pts x 601", lambda m: m.gaussian_kde(vals, grid, 0.02)),
    ]


def best_of(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def end_to_end():
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, FLOWLAB_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        backend, secs = res.stdout.split()
        out[backend] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-train", action="store_true", help="skip the end-to-end training row")
    args = ap.parse_args(argv)

    print(f"{'kernel':34s} {'cython':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name, fn in cases():
        tc = best_of(lambda: fn(_kernels), args.repeat)
        tp = best_of(lambda: fn(_fallback), args.repeat)
        print(f"{name:34s} {tc * 1e3:9.3f}ms {tp * 1e3:9.3f}ms {tp / tc:7.2f}x")
    if not args.skip_train:
        e2e = end_to_end()
        tc, tp = e2e["cython"], e2e["python"]
        print(f"{'conv train step (mask, 16ch, B=32)':34s} {tc * 1e3:9.1f}ms {tp * 1e3:9.1f}ms {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
