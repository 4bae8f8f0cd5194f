"""Compiled (Cython) vs numpy-fallback kernels on desk-scale workloads.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each row reports the median wall time per call for both backends and the
speed-up. Backends are swapped in-process, the same way the test suite does.
"""

import argparse
import json
import statistics
import time

import numpy as np

import hdteacher.kernels as kernels
from hdteacher import tensor as T
from hdteacher.kernels import load_backend
from hdteacher.losses import dice_loss, mse
from hdteacher.networks import DualDecoderNet, UNetConfig, forward_student
from hdteacher.sdf import compute_sdf

KERNEL_NAMES = ("conv_forward", "conv_backward_input", "conv_backward_weight", "edt_lines")


def use_backend(name):
    impl = load_backend(name)
    for k in KERNEL_NAMES:
        setattr(kernels, k, getattr(impl, k))


def conv_case(rank, batch, cin, cout, spatial):
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(batch, cin) + spatial).astype(np.float32), requires_grad=True)
    w = T.Tensor(rng.normal(size=(cout, cin) + (3,) * rank).astype(np.float32), requires_grad=True)

    def run():
        T.sum(T.conv(x, w, rank, 1, 1)).backward()
        x.grad = w.grad = None
    return run


def net_case(rank, batch, spatial):
    cfg = UNetConfig(rank, 1 if rank == 2 else 3, 2, base_features=8, depth=2)
    net = DualDecoderNet(cfg, T.make_rng(0))
    rng = np.random.default_rng(1)
    x = rng.normal(size=(batch, cfg.in_channels) + spatial).astype(np.float32)
    labels = rng.integers(0, 2, size=(batch,) + spatial)
    z = rng.uniform(-1, 1, size=(batch, 2) + spatial).astype(np.float32)

    def run():
        out = forward_student(net, x)
        (dice_loss(out.seg_probs, labels) + mse(out.sdf_pred, z)).backward()
        for p in net.parameters():
            p.grad = None
    return run


def sdf_case(dims):
    rng = np.random.default_rng(2)
    labels = (rng.random(dims) < 0.2).astype(np.uint8)
    return lambda: compute_sdf(labels, 1, (5.0, 0.4, 0.4))


CASES = {
    "conv2d fwd+bwd 16x8x32x32": lambda: conv_case(2, 16, 8, 8, (32, 32)),
    "conv3d fwd+bwd 2x8x8x32x32": lambda: conv_case(3, 2, 8, 8, (8, 32, 32)),
    "2D net step, batch 16 @ 32x32": lambda: net_case(2, 16, (32, 32)),
    "3D net step, batch 2 @ 8x32x32": lambda: net_case(3, 2, (8, 32, 32)),
    "SDF 16x32x32": lambda: sdf_case((16, 32, 32)),
    "SDF 32x128x128": lambda: sdf_case((32, 128, 128)),
}


def measure(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    ap.add_argument("--only", help="substring filter on case names")
    args = ap.parse_args(argv)
    try:
        load_backend("compiled")
        backends = ("python", "compiled")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
        backends = ("python",)

    results = []
    print(f"{'case':34s} " + " ".join(f"{b:>12s}" for b in backends) + ("   speed-up" if len(backends) == 2 else ""))
    for name, make in CASES.items():
        if args.only and args.only not in name:
            continue
        row = {"case": name}
        for b in backends:
            use_backend(b)
            row[b] = measure(make(), args.repeat)
        line = f"{name:34s} " + " ".join(f"{row[b] * 1e3:10.1f}ms" for b in backends)
        if len(backends) == 2:
            row["speedup"] = row["python"] / row["compiled"]
            line += f"   {row['speedup']:8.2f}x"
        print(line, flush=True)
        results.append(row)
    use_backend(kernels.BACKEND)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
