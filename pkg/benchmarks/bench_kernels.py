"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel runs once untimed (compilation), then ``repeat`` times per
path; the table reports the best time and checks both paths agree.
Set POLYMOTION_DISABLE_NUMBA=1 to make the library itself use numpy;
this script always times both.
"""
import argparse
import json
import time

import numpy as np

from polymotion import _accel


def cases(rng):
    z = rng.normal(size=(2048, 32))
    cb = rng.normal(size=(512, 32))
    x = rng.normal(size=(8, 66, 64))
    cols = rng.normal(size=(8, 32, 4, 64))
    p, g = rng.normal(size=(2, 256, 256))

    def adam(f):
        out = p.copy()
        f(out, g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 3)
        return out

    return {
        "nearest_code": lambda f: f(z, cb),
        "pairwise_l2": lambda f: f(cb),
        "im2col": lambda f: f(x, 4, 2, 32),
        "col2im": lambda f: f(cols, 66, 2),
        "adam_update": adam,
    }


def best_of(call, fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        call(fn)
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if not _accel.NUMBA_INSTALLED:
        print("numba is not installed; only the numpy path can run")
    rows = []
    print(f"{'kernel':14s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, call in cases(np.random.default_rng(0)).items():
        np_fn, nb_fn = _accel.KERNELS[name]
        call(nb_fn)  # compile
        a = call(np_fn)
        b = call(nb_fn)
        agree = bool(np.allclose(a, b, rtol=1e-12, atol=1e-12))
        t_np = best_of(call, np_fn, args.repeat)
        t_nb = best_of(call, nb_fn, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb,
                     "agree": agree})
        print(f"{name:14s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}  {agree}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows


if __name__ == "__main__":
    main()
