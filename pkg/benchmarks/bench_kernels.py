"""Compare the compiled and pure-Python randomized-response kernels.

    python benchmarks/bench_kernels.py [--owners N] [--cells K] [--repeat R]

Both backends consume the same PCG64 stream, so the script also checks that
their outputs are identical before timing them.
"""

import argparse
import timeit

import numpy as np

from privgps import _kernels_py

try:
    from privgps import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--owners", type=int, default=100_000)
    ap.add_argument("--cells", type=int, default=9)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    cells = np.random.default_rng(0).integers(-1, args.cells, args.owners).astype(np.int64)
    onehot = np.zeros(args.cells * 64, dtype=np.uint8)
    onehot[3] = 1
    backends = {"pure": _kernels_py}
    if _compiled is not None:
        backends["compiled"] = _compiled
    else:
        print("compiled extension not available; timing the fallback only")

    outputs = {name: mod.rr_counts(cells, args.cells, 0.5, 0.5, np.random.PCG64(1)) for name, mod in backends.items()}
    if len(outputs) == 2:
        assert np.array_equal(outputs["pure"], outputs["compiled"]), "backends disagree"

    print(f"{'kernel':<28}{'backend':<10}{'best ms':>10}")
    results = {}
    for name, mod in backends.items():
        for label, fn in (
            (f"rr_counts owners={args.owners}", lambda: mod.rr_counts(cells, args.cells, 0.5, 0.5, np.random.PCG64(1))),
            (f"rr_bits n={onehot.size} x1000", lambda: [mod.rr_bits(onehot, 0.5, 0.5, bg) for bg in [np.random.PCG64(2)]
                                                       for _ in range(1000)]),
        ):
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1000
            results[label, name] = best
            print(f"{label:<28}{name:<10}{best:>10.2f}")
    if _compiled is not None:
        for label in {k[0] for k in results}:
            print(f"speedup {label}: {results[label, 'pure'] / results[label, 'compiled']:.1f}x")


if __name__ == "__main__":
    main()
