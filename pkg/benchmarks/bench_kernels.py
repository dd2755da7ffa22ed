"""Compare the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--sizes 64,4096,65536] [--repeat 5]

Both backends are imported directly, so the result does not depend on
SHADOWRANGE_PURE_KERNELS. Outputs are cross-checked before timing.
"""

from __future__ import annotations

import argparse
import random
import timeit

from shadowrange import _purekernels

try:
    from shadowrange import _speedups
except ImportError:
    _speedups = None


def best_of(fn, repeat: int, number: int) -> float:
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,1024,16384,65536")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _speedups is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    rng = random.Random(0)
    key, nonce = rng.randbytes(32), rng.randbytes(8)
    print(f"{'kernel':<14}{'bytes':>8}{'pure us':>12}{'compiled us':>14}{'speedup':>10}{'pure MB/s':>12}{'comp MB/s':>12}")
    for size in (int(s) for s in args.sizes.split(",")):
        data = rng.randbytes(size)
        cases = [
            ("keystream_xor", lambda m: m.keystream_xor(key, nonce, 7, data)),
            ("fnv1a32", lambda m: m.fnv1a32(data)),
        ]
        for name, call in cases:
            assert call(_purekernels) == call(_speedups), name
            number = max(1, 200_000 // max(size, 1))
            pure = best_of(lambda: call(_purekernels), args.repeat, number)
            comp = best_of(lambda: call(_speedups), args.repeat, max(number, 20))
            mb = size / 1e6
            print(f"{name:<14}{size:>8}{pure * 1e6:>12.1f}{comp * 1e6:>14.1f}{pure / comp:>9.1f}x{mb / pure:>12.1f}{mb / comp:>12.1f}")


if __name__ == "__main__":
    main()
