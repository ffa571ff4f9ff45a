"""Compare the compiled and pure-Python packet-train propagation kernels.

    python benchmarks/bench_kernel.py [--links 10] [--packets 20000] [--repeat 5]
"""

import argparse
import sys
import timeit

import numpy as np

from cdtp.simnet import kernel


def workload(links: int, packets: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    inject = np.cumsum(rng.integers(0, 50_000, packets)).astype(np.int64)
    ser = rng.integers(1_000, 5_000_000, (links, packets)).astype(np.int64)
    lat = rng.integers(0, 50_000_000, links).astype(np.int64)
    hold = rng.integers(0, 1_000_000, links).astype(np.int64)
    return inject, ser, lat, hold


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--links", type=int, default=10)
    p.add_argument("--packets", type=int, default=20000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    args_ = workload(args.links, args.packets)
    ref = kernel.propagate_py(*args_)
    t_py = min(timeit.repeat(lambda: kernel.propagate_py(*args_), number=1, repeat=args.repeat))
    print(f"python  {t_py * 1e3:9.2f} ms  ({args.links} links x {args.packets} packets)")
    if kernel.propagate_c is None:
        print("cython  not built (install with: pip install -e . --no-build-isolation)")
        return 0
    out = kernel.propagate(*args_)
    if not np.array_equal(out, ref):
        print("MISMATCH between compiled and Python kernels", file=sys.stderr)
        return 1
    t_c = min(timeit.repeat(lambda: kernel.propagate(*args_), number=1, repeat=args.repeat))
    print(f"cython  {t_c * 1e3:9.2f} ms  speedup x{t_py / t_c:.1f}, outputs identical")
    return 0


if __name__ == "__main__":
    sys.exit(main())
