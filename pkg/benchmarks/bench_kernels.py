"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is timed with ``timeit`` (best of ``--repeat`` runs), and the
two backends' outputs are checked against each other before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from salience_filter import kernels
from salience_filter import tensor as T
from salience_filter.geometry import grid_axis_coords
from salience_filter.refinement import FusionParams, cross_level_fuse


def make_cases(rng):
    x = rng.normal(size=(16, 32, 32))
    k3 = rng.normal(size=(16, 2, 3, 3))
    k1 = rng.normal(size=(32, 16, 1, 1))
    joined = rng.normal(size=(16, 32, 32))
    gout = rng.normal(size=(16, 32, 32))

    xy = rng.uniform(0, 256, (300, 2))
    wh = rng.uniform(8, 64, (300, 2))
    corners = np.concatenate([xy - wh / 2, xy + wh / 2], axis=1)
    scores = rng.random(300)

    boxes = np.column_stack([rng.uniform(0, 256, (6, 2)), rng.uniform(8, 128, (6, 2))])
    axis = grid_axis_coords(32, 8)

    fusion = FusionParams.init(16, num_blocks=2, groups=8, rng=rng)
    fine, coarse = T.parameter(rng.normal(size=(16, 32, 32))), T.parameter(rng.normal(size=(16, 16, 16)))

    def fuse_step(impl):
        # end to end through the dispatcher, which keeps 1x1 kernels on numpy
        saved, kernels._impl = kernels._impl, impl
        try:
            with T.Tape() as tape:
                loss = cross_level_fuse(fine, coarse, fusion).sum()
            T.backward(tape, loss, [fine] + fusion.parameters())
            return fine.grad.copy()
        finally:
            kernels._impl = saved

    return {
        "conv3x3_fwd 16ch 32x32 g8": lambda impl: impl.conv2d_forward(x, k3, 8),
        "conv3x3_bwd 16ch 32x32 g8": lambda impl: impl.conv2d_backward(x, k3, gout, 8),
        "conv1x1_fwd 16->32ch 32x32": lambda impl: impl.conv2d_forward(joined, k1, 1),
        "nms 300 boxes": lambda impl: impl.nms(corners, scores, 0.3),
        "salience_map 32x32 6 boxes": lambda impl: impl.salience_map(axis, axis, boxes),
        "fusion fwd+bwd 16ch 32x32 N=2": fuse_step,
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-10, atol=1e-10)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=0, help="calls per run (0: autorange)")
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args(argv)

    backends = kernels.BACKENDS
    if "cython" not in backends:
        print("compiled backend not built; timing the python fallback only", file=sys.stderr)
    cases = make_cases(np.random.default_rng(0))
    results = []
    print(f"{'case':30s} " + " ".join(f"{name:>12s}" for name in backends) + "      speedup")
    for label, fn in cases.items():
        outs = {name: fn(impl) for name, impl in backends.items()}
        ref = outs["python"]
        agree = all(_same(o, ref) for o in outs.values())
        row = {"case": label, "agree": agree}
        for name, impl in backends.items():
            timer = timeit.Timer(lambda: fn(impl))
            number = args.number or timer.autorange()[0]
            row[name] = min(timer.repeat(args.repeat, number)) / number
        speed = row["python"] / row["cython"] if "cython" in row else float("nan")
        row["speedup"] = speed
        results.append(row)
        times = " ".join(f"{row[name] * 1e3:10.3f}ms" for name in backends)
        print(f"{label:30s} {times} {speed:10.1f}x{'' if agree else '  OUTPUT MISMATCH'}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0 if all(r["agree"] for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
