"""Compare the compiled and numpy kernels, and time a tiny training step.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from ccdc import _pykernels
from ccdc.ops import HV

try:
    from ccdc import _ckernels
except ImportError:
    _ckernels = None


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def kernel_cases(k, x, offs, pooled):
    n, c, h, w = x.shape
    cols = k.gather_taps(x, offs, 1, 1)
    out, idx = k.maxpool_forward(x)
    return {
        "gather_taps": lambda: k.gather_taps(x, offs, 1, 1),
        "scatter_taps": lambda: k.scatter_taps(cols, offs, 1, 1, h, w),
        "maxpool_forward": lambda: k.maxpool_forward(x),
        "maxpool_backward": lambda: k.maxpool_backward(pooled, idx, h, w),
    }


def train_step_ms(repeat):
    from ccdc.network import Network, preset
    from ccdc.train import AdamState, adam_step, depth_loss_grad, net_grads, net_params

    rng = np.random.default_rng(0)
    net = Network(preset("dc-cdn", "tiny"), rng)
    x = rng.uniform(size=(8, 3, 64, 64)).astype(np.float32)
    y = rng.uniform(size=(8, 1, 8, 8)).astype(np.float32)
    opt, params = AdamState(), net_params(net)

    def step():
        pred, _ = net.forward(x, train=True)
        net.backward(depth_loss_grad(pred, y))
        adam_step(opt, params, net_grads(net))

    return bench(step, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--shape", default="8,12,64,64", help="N,C,H,W of the kernel input")
    args = ap.parse_args()
    shape = tuple(int(v) for v in args.shape.split(","))
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape).astype(np.float32)
    pooled = rng.normal(size=_pykernels.maxpool_forward(x)[0].shape).astype(np.float32)
    offs = HV.offsets
    print(f"input {shape}, HV taps, float32, best of {args.repeat}")
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    py_cases = kernel_cases(_pykernels, x, offs, pooled)
    c_cases = kernel_cases(_ckernels, x, offs, pooled) if _ckernels else {}
    for name, fn in py_cases.items():
        tp = bench(fn, args.repeat)
        if name in c_cases:
            tc = bench(c_cases[name], args.repeat)
            print(f"{name:<18}{tp:>10.3f}{tc:>11.3f}{tp / tc:>8.2f}x")
        else:
            print(f"{name:<18}{tp:>10.3f}{'n/a':>11}")
    from ccdc import _backend

    print(f"dc-cdn tiny train step, batch 8 ({_backend.BACKEND} backend): {train_step_ms(5):.1f} ms")


if __name__ == "__main__":
    main()
