"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Also times one short training run under each backend (each in a fresh
interpreter, since the backend is chosen at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from advimitate import _kernels_py

try:
    from advimitate import _kernels as compiled
except ImportError:
    compiled = None

TRAIN_SNIPPET = """
import time
from advimitate.config import load_config
from advimitate.trainer import train
import tempfile
cfg = load_config(None, ["env.params={width: 5, height: 5, slip_prob: 0.1}", "demos.n_episodes=20",
                         "train.iterations=5", "net.actor_hidden=64", "net.critic_hidden=64"])
with tempfile.TemporaryDirectory() as d:
    from advimitate.demos import expert_for, generate_demos
    from advimitate.envs import make_env
    env = make_env("gridworld", width=5, height=5, slip_prob=0.1)
    demos = generate_demos(expert_for(env, 0.1), env, 20, 0)
    t = time.perf_counter()
    train(cfg, demos=demos, out_dir=d)
    print(time.perf_counter() - t)
"""


def cases(rng):
    n = 256 * 256
    p, g, m = rng.normal(size=(3, n))
    v = rng.random(n)
    r, vals = rng.normal(size=500), rng.normal(size=501)
    bins, steps = rng.integers(0, 65, 5000), rng.integers(0, 200, 5000)
    return {
        "adam_update (65k params)": lambda k: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.5, 0.5),
        "gae_advantages (T=500)": lambda k: k.gae_advantages(r, vals, 0.995, 0.97),
        "discounted_occupancy (5k steps)": lambda k: k.discounted_occupancy(bins, steps, 0.995, 65),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--no-train", action="store_true", help="skip the end-to-end timing")
    args = ap.parse_args()
    if compiled is None:
        print("compiled kernels are not built; run `pip install --no-build-isolation -e .`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python us':>11s} {'cython us':>11s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=3)) / args.repeat
        cy = min(timeit.repeat(lambda: fn(compiled), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:34s} {py * 1e6:11.1f} {cy * 1e6:11.1f} {py / cy:7.1f}x")
    if not args.no_train:
        times = {}
        for backend, flag in (("python", "1"), ("cython", "0")):
            env = dict(os.environ, ADVIMITATE_PURE_PYTHON=flag)
            out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, check=True,
                                 capture_output=True, text=True).stdout
            times[backend] = float(out.strip().splitlines()[-1])
        print(f"{'train 5 iters (5x5 grid)':34s} {times['python'] * 1e3:9.0f}ms "
              f"{times['cython'] * 1e3:9.0f}ms {times['python'] / times['cython']:7.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
