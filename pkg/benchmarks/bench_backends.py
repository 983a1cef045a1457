"""Compare the compiled kernels with the numpy fallback.

Times each hot kernel on representative UltraSeg shapes, then a full
ultraseg-108k forward (and optionally a training step) under each backend.

    python benchmarks/bench_backends.py --repeats 20 --json out.json
"""

import argparse
import json
import statistics
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from ultraseg import kernels, zoo
from ultraseg.autodiff import backward, no_grad
from ultraseg.data import build_pyramid
from ultraseg.losses import total_loss
from ultraseg.tensor import Rng


def kernel_cases():
    r = Rng(0)
    x16 = r.tensor((1, 16, 128, 128))
    x48 = r.tensor((1, 48, 32, 32))
    w48 = r.tensor((48, 1, 3, 3))
    gy = r.tensor((1, 48, 32, 32))
    mask = r.uniform(256 * 256).reshape(256, 256) < 0.02
    _, idx = kernels.maxpool2_forward(x16)
    return {
        "im2col 16ch 3x3 @128": lambda: kernels.im2col(x16, 3, 3, 1, 1, 1, 1, 1, 1, 128, 128),
        "depthwise fwd d3 @32": lambda: kernels.dw_forward(x48, w48, 1, 1, 3, 3, 3, 3, 32, 32),
        "depthwise bwd d3 @32": lambda: kernels.dw_backward(x48, w48, gy, 1, 1, 3, 3, 3, 3),
        "gelu fwd 16ch @128": lambda: kernels.gelu_forward(x16),
        "maxpool2 fwd 16ch @128": lambda: kernels.maxpool2_forward(x16),
        "maxpool2 bwd 16ch @64": lambda: kernels.maxpool2_backward(x16[:, :, ::2, ::2].copy(), idx),
        "upsample2 fwd 48ch @32": lambda: kernels.upsample2_forward(x48),
        "edt 256x256": lambda: kernels.edt_sq(mask),
    }


def time_call(fn, repeats, warmup=2):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples) * 1e3


def model_cases(size):
    model = zoo.build("ultraseg-108k", seed=1)
    image = Rng(1).tensor((1, 3, size, size), 0.0, 1.0)
    mask = np.zeros((1, 1, size, size), np.float32)
    mask[..., size // 4: size // 2, size // 3: 2 * size // 3] = 1
    pyramid = build_pyramid(mask)

    def forward():
        model.eval()
        with no_grad():
            model(image)

    def train_step():
        model.train()
        loss, _ = total_loss(model(image), pyramid)
        backward(loss)
        model.zero_grad()

    return {f"ultraseg-108k forward @{size}": forward, f"ultraseg-108k train step @{size}": train_step}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)

    backends = kernels.available()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    rows = {}
    with threadpool_limits(limits=1):
        for backend in backends:
            with kernels.use_backend(backend):
                cases = {**kernel_cases(), **model_cases(args.size)}
                for name, fn in cases.items():
                    rows.setdefault(name, {})[backend] = time_call(fn, args.repeats)

    width = max(len(n) for n in rows)
    header = f"{'case':<{width}}  " + "  ".join(f"{b + ' ms':>12}" for b in backends)
    if len(backends) == 2:
        header += f"  {'speedup':>8}"
    print(header)
    for name, t in rows.items():
        line = f"{name:<{width}}  " + "  ".join(f"{t[b]:12.3f}" for b in backends)
        if len(backends) == 2:
            line += f"  {t['python'] / t['compiled']:7.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"repeats": args.repeats, "size": args.size, "median_ms": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
