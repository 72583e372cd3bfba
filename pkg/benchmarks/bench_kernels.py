"""Compare the compiled box kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from semaug.kernels import _fallback

try:
    from semaug.kernels import _core
except ImportError:  # extension not built
    _core = None


def random_boxes(rng, n, size=600.0):
    xy = rng.uniform(0, size * 0.9, (n, 2))
    wh = rng.uniform(4, size * 0.2, (n, 2))
    return np.ascontiguousarray(np.concatenate([xy, xy + wh], axis=1))


def cases(rng):
    a, b = random_boxes(rng, 512), random_boxes(rng, 64)
    nb, ns = random_boxes(rng, 2000), rng.random(2000)
    preds, gts = random_boxes(rng, 300), random_boxes(rng, 40)
    return {
        "box_iou 512x64": lambda m: m.box_iou(a, b),
        "nms 2000 @0.7": lambda m: m.nms(nb, ns, 0.7),
        "greedy_match 300x40": lambda m: m.greedy_match(preds, gts, 0.5),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    results = []
    backends = {"python": _fallback}
    if _core is not None:
        backends["cython"] = _core
    else:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in backends.items():
            fn(mod)  # warm-up
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<22}" + "".join(f"{times[n] * 1e3:>12.3f}ms" for n in backends) + f"{speed:>9.1f}x")
        results.append({"kernel": label, "seconds": times, "speedup": speed})
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
