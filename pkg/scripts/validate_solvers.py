#!/usr/bin/env python3
"""Compare the relaxed solver with closed forms and RK4 on two linear ODEs.

Prints the sup-norm deviation of u and u' for u''+u=0 (against cos) and
u'''+u''+u'=0 (against RK4), followed by a step-halving convergence table
for u''+u=0 over t in [0, 10].

    python scripts/validate_solvers.py [--out DIR]
"""

import argparse
import time
from pathlib import Path

import numpy as np

from neurlp.assembly import assemble
from neurlp.kkt import solve
from neurlp.ode_spec import OdeSpec
from neurlp.oracle import IvpProblem, linear_ode_rhs, rk4, write_trajectory


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, help="also write solution/reference CSVs here")
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--h", type=float, default=0.1)
    args = ap.parse_args()
    n, h = args.steps, args.h
    t = h * np.arange(n)

    cases = {
        "harmonic": ([1.0, 0.0, 1.0], [1.0, 0.0]),
        "third_order": ([0.0, 1.0, 1.0, 1.0], [0.0, 1.0, 0.0]),
    }
    print(f"{'system':<12} {'sup |u|':>10} {'sup |du|':>10} {'seconds':>8}")
    for name, (coeffs, init) in cases.items():
        spec = OdeSpec.constant(coeffs, n, h, init=init)
        t0 = time.perf_counter()
        sol = solve(assemble(spec))
        dt = time.perf_counter() - t0
        if name == "harmonic":
            ref = np.stack([np.cos(t), -np.sin(t)], axis=1)
        else:
            ref = rk4(IvpProblem(len(init), linear_ode_rhs(coeffs), 0.0, init, h, n - 1)).y[:, :2]
        got = np.stack([sol.trajectory(0, 0), sol.trajectory(0, 1)], axis=1)
        eu, edu = np.abs(got - ref).max(axis=0)
        print(f"{name:<12} {eu:10.3e} {edu:10.3e} {dt:8.3f}")
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            write_trajectory(args.out / f"{name}_solver.csv", t, got)
            write_trajectory(args.out / f"{name}_reference.csv", t, ref)

    print("\nconvergence of u''+u=0 on [0, 10]")
    print(f"{'h':>7} {'sup error':>10} {'ratio':>7}")
    prev = None
    for hh in (0.1, 0.05, 0.025, 0.0125):
        m = int(round(10 / hh)) + 1
        sol = solve(assemble(OdeSpec.constant([1.0, 0.0, 1.0], m, hh, init=[1.0, 0.0])))
        err = np.abs(sol.trajectory() - np.cos(hh * np.arange(m))).max()
        ratio = f"{err / prev:7.3f}" if prev else f"{'':>7}"
        print(f"{hh:7.4f} {err:10.3e} {ratio}")
        prev = err


if __name__ == "__main__":
    main()
