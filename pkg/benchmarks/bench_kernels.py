"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is timed on both implementations with identical inputs, and the
outputs are checked for agreement before timing. ``register`` is timed end to
end by swapping the backend behind ``lesiontrack.kernels``.
"""
import argparse
import json
import math
import sys
import timeit

import numpy as np

from lesiontrack import _kernels_py, kernels
from lesiontrack.image import Image
from lesiontrack.registration import AffineTransform, register, warp
from lesiontrack.sampling.synth import SynthConfig, phantom

try:
    from lesiontrack import _ckernels
except ImportError:
    _ckernels = None


def _inputs(rng):
    img = phantom(SynthConfig(image_px=512), 3)
    th = math.radians(4.0)
    m = np.array([[1.02 * math.cos(th), -math.sin(th), 6.0], [math.sin(th), 0.98 * math.cos(th), -4.0]])
    small = img[::8, ::8].copy()
    boxes = rng.uniform(0, 200, (300, 2))
    corners = np.c_[boxes, boxes + rng.uniform(5, 40, (300, 2))]
    order = np.argsort(-rng.uniform(size=300), kind="stable").astype(np.intp)
    return img, small, m.reshape(6), corners, order


def _cases(img, small, m, corners, order):
    cols = [np.ascontiguousarray(corners[:, k]) for k in range(4)]
    return {
        "sample_affine 512x512": lambda k: k.sample_affine(img, m, 512, 512),
        "l1_cost_grad 512x512": lambda k: k.l1_cost_grad(img, img, m, 1e-3),
        "l1_cost_grad 64x64": lambda k: k.l1_cost_grad(small, small, m, 1e-3),
        "nms_sorted n=300": lambda k: k.nms_sorted(*cols, order, 0.5),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float):
        return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-12)
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-12)


def _time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def _register_time(impl, repeat):
    img = Image(phantom(SynthConfig(image_px=512), 5), 0.28)
    t = AffineTransform.about_point(np.array([[1.03, -0.05], [0.05, 1.03]]), (255.5, 255.5), (12.0, -9.0))
    moving = warp(img, t)
    saved = kernels._impl
    kernels._impl = impl
    try:
        return min(timeit.repeat(lambda: register(img, moving), number=1, repeat=max(1, repeat // 2)))
    finally:
        kernels._impl = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in _cases(*_inputs(rng)).items():
        if not _same(fn(_ckernels), fn(_kernels_py)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 2
        rows.append((name, _time(lambda: fn(_ckernels), args.repeat), _time(lambda: fn(_kernels_py), args.repeat)))
    rows.append(("register (end to end)", _register_time(_ckernels, args.repeat),
                 _register_time(_kernels_py, args.repeat)))
    print(f"{'kernel':<24} {'cython ms':>10} {'python ms':>10} {'speedup':>8}")
    for name, c, p in rows:
        print(f"{name:<24} {1e3 * c:10.3f} {1e3 * p:10.3f} {p / c:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"kernel": n, "cython_s": c, "python_s": p} for n, c, p in rows], fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
