"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_conv.py [--repeat 5] [--step]

Kernel timings call both backends directly on training-sized shapes. With
``--step`` a full training step (forward + backward + Adam) is also timed
under each backend in a subprocess, since the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mbl.nn import kernels

SHAPES = [
    # (batch, time, c_in, c_out, dilation)
    (32, 512, 12, 16, 1),
    (32, 512, 32, 32, 4),
    (32, 512, 16, 16, 64),
    (64, 300, 32, 32, 14),
]

STEP_SCRIPT = """
import json, time
import numpy as np
from mbl.nn import kernels
from mbl.synthgen import GeneratorConfig, generate_dataset
from mbl.trainer import TrainConfig, model_config_for, train
ds = generate_dataset(GeneratorConfig(num_sequences=8))
cfg = TrainConfig(epochs=1, seed=0, batch_size=8)
train(ds, model_config_for(ds), cfg, max_steps=1)
t0 = time.perf_counter()
train(ds, model_config_for(ds), TrainConfig(epochs=3, seed=0, batch_size=8))
print(json.dumps({"backend": kernels.BACKEND, "seconds": (time.perf_counter() - t0) / 3}))
"""


def time_kernels(forward, backward, shape, repeat):
    b, t, cin, cout, d = shape
    rng = np.random.default_rng(0)
    x = rng.normal(size=(b, t, cin))
    wt = rng.normal(size=(2, cin, cout))
    gout = rng.normal(size=(b, t, cout))

    def fwd():
        forward(x, wt, np.zeros((b, t, cout)), d)

    def bwd():
        backward(x, wt, gout, np.zeros_like(x), np.zeros_like(wt), d, True)

    return min(timeit.repeat(fwd, number=3, repeat=repeat)) / 3, min(timeit.repeat(bwd, number=3, repeat=repeat)) / 3


def time_step(pure):
    env = dict(os.environ)
    env.pop("MBL_PURE_PYTHON", None)
    if pure:
        env["MBL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training epoch per backend")
    args = ap.parse_args(argv)

    if not kernels.compiled_available():
        print("compiled extension not built; only the numpy backend is available")
        backends = {"numpy": (kernels.conv_forward_numpy, kernels.conv_backward_numpy)}
    else:
        backends = {
            "numpy": (kernels.conv_forward_numpy, kernels.conv_backward_numpy),
            "compiled": (kernels._ext.conv_forward, kernels._ext.conv_backward),
        }

    print(f"{'shape (B,T,Cin,Cout,d)':<26}{'backend':<10}{'fwd ms':>9}{'bwd ms':>9}")
    for shape in SHAPES:
        res = {name: time_kernels(f, b, shape, args.repeat) for name, (f, b) in backends.items()}
        for name, (tf, tb) in res.items():
            print(f"{str(shape):<26}{name:<10}{1e3 * tf:9.2f}{1e3 * tb:9.2f}")
        if "compiled" in res:
            fw = res["numpy"][0] / res["compiled"][0]
            bw = res["numpy"][1] / res["compiled"][1]
            print(f"{'':<26}{'speedup':<10}{fw:8.2f}x{bw:8.2f}x")

    if args.step:
        for pure in (False, True):
            r = time_step(pure)
            print(f"training epoch ({r['backend']}): {r['seconds']:.2f} s")


if __name__ == "__main__":
    main()
