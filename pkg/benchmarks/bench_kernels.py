"""Time the compiled and pure-Python resegmentation kernels on the same inputs.

    python benchmarks/bench_kernels.py --sizes 200 1000 2000 --repeat 3
"""

import argparse

from streamterm import bench, kernels


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[200, 1000, 2000])
    ap.add_argument("--segments", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    print(f"# available backends: {', '.join(kernels.backends())}; default: {kernels.BACKEND}")
    print(bench.format_table(bench.run(args.sizes, args.segments, args.repeat)))


if __name__ == "__main__":
    main()
