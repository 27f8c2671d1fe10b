#!/usr/bin/env python3
"""Wall-clock growth of the relaxed-solver fit versus an RK4-shooting fit.

Both fit a damped oscillator to a noisy sine of each length for the same
number of iterations.  Absolute times depend on the machine; the growth
ratio between the shortest and longest length is what is compared.

    python scripts/benchmark.py [--lengths 40,100,300,1000] [--trials 3]
"""

import argparse

from neurlp.cli import growth_ratios, run_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", default="40,100,300,500,1000")
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    lengths = [int(v) for v in args.lengths.split(",")]
    rows = run_benchmark(lengths, args.trials, args.iterations, args.seed)
    print(f"{'length':>6} {'trial':>5} {'neurlp s':>9} {'baseline s':>10} {'speedup':>8} {'neurlp loss':>12}")
    for r in rows:
        print(f"{r['length']:6d} {r['trial']:5d} {r['neurlp_seconds']:9.3f} {r['baseline_seconds']:10.3f} "
              f"{r['speedup']:8.2f} {r['neurlp_loss']:12.4e}")
    g = growth_ratios(rows)
    print(f"growth {g['short']} -> {g['long']} steps: neurlp x{g['neurlp_ratio']:.2f}, "
          f"baseline x{g['baseline_ratio']:.2f}")


if __name__ == "__main__":
    main()
