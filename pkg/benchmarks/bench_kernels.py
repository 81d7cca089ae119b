"""Compare the compiled and pure-Python edit-distance kernels.

    python3 benchmarks/bench_kernels.py [--pairs 2000] [--repeat 3]

Both backends are called on the same random token sequences; results must
agree exactly before any timing is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dualqe import _editdist_py

try:
    from dualqe._ext import editdist as _editdist_ext
except ImportError:  # extension not built
    _editdist_ext = None


def make_pairs(n, seed, vocab=30, min_len=4, max_len=40):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = rng.integers(0, vocab, size=int(rng.integers(min_len, max_len + 1))).astype(np.int64)
        b = rng.integers(0, vocab, size=int(rng.integers(min_len, max_len + 1))).astype(np.int64)
        out.append((a, b))
    return out


def run(kernel, pairs, repeat):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = [kernel.levenshtein(a, b) for a, b in pairs]
        best = min(best, time.perf_counter() - t0)
    return best, result


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pairs", type=int, default=2000)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    pairs = make_pairs(args.pairs, args.seed)
    t_py, ref = run(_editdist_py, pairs, args.repeat)
    print(f"python  {t_py * 1e3:9.2f} ms  ({args.pairs} pairs, best of {args.repeat})")
    if _editdist_ext is None:
        print("cython  not built (pip install -e . with Cython available)")
        return
    t_ext, got = run(_editdist_ext, pairs, args.repeat)
    if got != ref:
        raise SystemExit("backends disagree")
    print(f"cython  {t_ext * 1e3:9.2f} ms  speedup x{t_py / t_ext:.1f}")


if __name__ == "__main__":
    main()
