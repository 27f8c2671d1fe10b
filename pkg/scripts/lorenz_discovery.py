#!/usr/bin/env python3
"""Recover the Lorenz equations from one simulated trajectory.

Simulates sigma=10, rho=28, beta=8/3 with RK4 (dt=0.01, 2500 points), runs
sparse discovery with a degree-2 polynomial library and thresholding, and
prints the learned equations with the error of every true coefficient.

    python scripts/lorenz_discovery.py [--iterations 2000] [--out DIR]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from neurlp.oracle import IvpProblem, lorenz, rk4, write_trajectory
from neurlp.trainer import DiscoveryModel, TrainConfig, discover

TRUTH = {(0, "x"): -10.0, (0, "y"): 10.0, (1, "x"): 28.0, (1, "y"): -1.0, (1, "xz"): -1.0,
         (2, "z"): -8.0 / 3.0, (2, "xy"): 1.0}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2500)
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--threshold", type=float, default=0.1)
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--out", type=Path, help="write trajectory CSV and model checkpoint here")
    args = ap.parse_args()

    roll = rk4(IvpProblem(3, lorenz(), 0.0, [1.0, 1.0, 1.0], args.dt, args.points - 1))
    model = DiscoveryModel.polynomial(2, 3)
    t0 = time.perf_counter()
    res = discover([roll.y], model, args.dt,
                   TrainConfig(iterations=args.iterations, lr=args.lr, threshold=args.threshold),
                   window=args.window)
    dt = time.perf_counter() - t0
    print("\n".join(res.equations))
    print(f"active terms: {res.model.n_active()}   time: {dt:.1f}s   final loss: {res.history[-1]:.3e}")
    names = [b.name(["x", "y", "z"]) for b in model.basis]
    for (a, term), c in TRUTH.items():
        got = res.model.xi[names.index(term), a]
        print(f"  eq {'xyz'[a]}  {term:>3}: {got:+9.4f}  (true {c:+8.4f}, {100 * abs(got / c - 1):5.2f}%)")
    extra = res.model.active_mask.copy()
    for (a, term) in TRUTH:
        extra[names.index(term), a] = False
    print(f"spurious active terms: {int(extra.sum())}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_trajectory(args.out / "lorenz.csv", roll.t, roll.y)
        res.save(args.out / "checkpoint.json")


if __name__ == "__main__":
    main()
