"""Command-line interface: ``neurlp {solve,fit,discover,gradcheck,benchmark}``.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.  Every
command writes ``manifest.json`` to its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import assemble
from .backward import final_value_loss, gradcheck, squared_loss
from .basis import builtin_basis, var_names
from .kkt import QpConfig, SolverError, solve, solve_batch
from .ode_spec import OdeSpec, SpecError, load, loads
from .oracle import ANALYTIC_NAMES, IvpProblem, analytic, linear_ode_rhs, read_trajectory, rk4, write_trajectory
from .trainer import DiscoveryModel, TrainConfig, discover, fit, grid_points

log = logging.getLogger("neurlp")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named purpose, derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def stream_seed(seed: int, name: str) -> int:
    return int(stream(seed, name).integers(2**31 - 1))


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: str | None
    seed: int
    out: str
    phases: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    exit_code: int = 0
    version: str = __version__
    python: str = platform.python_version()

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - t0

    def add(self, path: Path) -> Path:
        self.artifacts[path.name] = sha256(path)
        return path

    def write(self) -> Path:
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True))
        return path


def _threads(args) -> int:
    env = os.environ.get("NEURLP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"NEURLP_THREADS must be an integer, got {env!r}") from None
    return max(1, args.threads)


def _qp(args) -> QpConfig:
    return QpConfig(gamma=args.gamma, path=args.path, workers=_threads(args))


def _load_spec(path) -> OdeSpec:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        return loads(p.read_text())
    except SpecError as e:
        raise ConfigError(f"{p}: {e}") from None


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: JSON parse error at line {e.lineno} column {e.colno}: {e.msg}") from None


# --- solve --------------------------------------------------------------------------


def oracle_trajectory(spec: OdeSpec, oracle: str) -> np.ndarray:
    """Reference ``(n, 2)`` array of ``u`` and ``u'`` for a single-dimension spec."""
    if spec.dim != 1:
        raise ConfigError("oracles are available for single-dimension specs only")
    t = spec.times
    if oracle.startswith("analytic:"):
        name = oracle.split(":", 1)[1]
        if name not in ANALYTIC_NAMES:
            raise ConfigError(f"unknown analytic case {name!r}; known: {', '.join(ANALYTIC_NAMES)}")
        return np.stack([analytic(name, t), analytic(name, t, 1)], axis=1)
    if oracle == "rk4":
        c = spec.full_coeffs()[0]
        b = spec.full_rhs()[0]
        if spec.nonlinear or not (np.allclose(c, c[0]) and np.allclose(b, b[0])):
            raise ConfigError("rk4 oracle needs constant coefficients and no nonlinear terms")
        if not np.allclose(spec.steps, spec.steps[0]):
            raise ConfigError("rk4 oracle needs a uniform grid")
        init = {ic.order: ic.value for ic in spec.init if ic.dim == 0}
        if sorted(init) != list(range(spec.order)):
            raise ConfigError("rk4 oracle needs initial values for every order below the ODE order")
        homog = linear_ode_rhs(c[0])
        shift = b[0] / c[0, -1]

        def f(tt, s):
            out = homog(tt, s)
            out[-1] += shift
            return out

        roll = rk4(IvpProblem(spec.order, f, 0.0, [init[i] for i in range(spec.order)],
                              float(spec.steps[0]), spec.n_steps - 1))
        if roll.diverged:
            raise SolverError("rk4 oracle diverged")
        y = roll.y
        return np.stack([y[:, 0], y[:, 1] if spec.order > 1 else np.array([f(0, s)[0] for s in y])], axis=1)
    raise ConfigError(f"unknown oracle {oracle!r}; use analytic:NAME or rk4")


def _write_solution(path: Path, spec: OdeSpec, sol) -> None:
    write_trajectory(path, spec.times, sol.state()[:, :, 0].T)


def cmd_solve(args, man: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    qp = _qp(args)
    if args.batch:
        files = sorted(Path(args.batch).glob("*.json"))
        if not files:
            raise ConfigError(f"no *.json specs in {args.batch}")
        with man.phase("load"):
            specs = [_load_spec(f) for f in files]
        with man.phase("assemble"):
            systems = [assemble(s) for s in specs]
        with man.phase("solve"):
            sols = solve_batch(systems, qp, workers=qp.workers)
        failed = 0
        for f, spec, sol in zip(files, specs, sols):
            if isinstance(sol, Exception):
                print(f"{f.name}: {sol}", file=sys.stderr)
                failed += 1
                continue
            man.add(_write(out / f"{f.stem}.csv", lambda p, s=spec, z=sol: _write_solution(p, s, z)))
        return EXIT_NUMERIC if failed else EXIT_OK

    if not args.config:
        raise ConfigError("solve needs --config or --batch")
    with man.phase("load"):
        spec = _load_spec(args.config)
    with man.phase("assemble"):
        cs = assemble(spec)
    with man.phase("solve"):
        sol = solve(cs, qp)
    man.add(_write(out / "solution.csv", lambda p: _write_solution(p, spec, sol)))
    if args.oracle:
        with man.phase("oracle"):
            ref = oracle_trajectory(spec, args.oracle)
        man.add(_write(out / "oracle.csv", lambda p: write_trajectory(p, spec.times, ref)))
        u = sol.trajectory(0, 0)
        du = sol.trajectory(0, 1)
        report = {
            "oracle": args.oracle,
            "sup_u": float(np.max(np.abs(u - ref[:, 0]))),
            "sup_du": float(np.max(np.abs(du - ref[:, 1]))),
            "mse_u": float(np.mean((u - ref[:, 0]) ** 2)),
            "epsilon": sol.epsilon_value,
        }
        man.add(_write(out / "diff.json", lambda p: p.write_text(json.dumps(report, indent=1))))
        print(json.dumps(report))
    return EXIT_OK


def _write(path: Path, writer) -> Path:
    writer(path)
    return path


# --- fit ----------------------------------------------------------------------------------


def _train_config(d: dict, seed: int, qp: QpConfig) -> TrainConfig:
    known = {"optimizer", "lr", "iterations", "loss", "noise_sigma", "threshold", "nonlinear_weight", "momentum"}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown training options {sorted(bad)}")
    try:
        return TrainConfig(seed=seed, qp=qp, **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def cmd_fit(args, man: RunManifest) -> int:
    """Config: ``{"spec": {...} | "path", "data": "csv" | {"analytic": name}, "which": [...], "train": {...}}``."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _read_json(args.config)
    base = Path(args.config).parent
    try:
        spec_src = cfg["spec"]
        which = cfg.get("which", ["coeffs"])
        data_src = cfg["data"]
    except KeyError as e:
        raise ConfigError(f"fit config missing {e.args[0]!r}") from None
    try:
        spec = load(base / spec_src) if isinstance(spec_src, str) else loads(json.dumps(spec_src))
    except (SpecError, FileNotFoundError) as e:
        raise ConfigError(str(e)) from None
    if isinstance(data_src, dict):
        data = analytic(data_src["analytic"], spec.times)
    else:
        _, data = read_trajectory(base / data_src)
    if data.shape[0] != spec.n_steps:
        raise ConfigError(f"data has {data.shape[0]} rows, spec has {spec.n_steps} steps")
    tc = _train_config(cfg.get("train", {}), stream_seed(args.seed, "fit"), _qp(args))
    with man.phase("fit"):
        res = fit(spec, data, which, tc)
    from .ode_spec import dumps

    man.add(_write(out / "fitted_spec.json", lambda p: p.write_text(dumps(res.spec))))
    man.add(_write(out / "history.csv", lambda p: np.savetxt(p, np.array(res.history), header="loss",
                                                             comments="", fmt="%.17g")))
    with man.phase("solve"):
        sol = solve(assemble(res.spec), tc.qp)
    man.add(_write(out / "solution.csv", lambda p: _write_solution(p, res.spec, sol)))
    print(json.dumps({"final_loss": res.final_loss, "failed": res.failed, "message": res.message}))
    if res.failed:
        print(f"fit failed: {res.message}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --- discover ---------------------------------------------------------------------------


def cmd_discover(args, man: RunManifest) -> int:
    if args.list_basis:
        dim = args.dim
        if dim is None and args.data:
            dim = read_trajectory(args.data[0])[1].shape[1]
        dim = dim or 2
        names = var_names(dim)
        for i, b in enumerate(builtin_basis(args.degree, dim)):
            print(f"{i}\t{b.name(names)}")
        return EXIT_OK
    if not args.data:
        raise ConfigError("discover needs at least one trajectory CSV")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trajs, steps = [], []
    for f in args.data:
        if not Path(f).exists():
            raise ConfigError(f"data file {f} not found")
        t, y = read_trajectory(f)
        trajs.append(y)
        steps.append(np.diff(t))
    step = args.step if args.step else float(np.mean(np.concatenate(steps)))
    dim = trajs[0].shape[1]
    if args.outer == "rational":
        model = DiscoveryModel.polynomial(args.num_degree, dim, outer="rational", den_degree=args.den_degree)
    else:
        model = DiscoveryModel.polynomial(args.degree, dim, outer=args.outer)
    tc = TrainConfig(iterations=args.iterations, lr=args.lr, threshold=args.threshold,
                     seed=stream_seed(args.seed, "discover"), qp=_qp(args))
    with man.phase("discover"):
        res = discover(trajs, model, step, tc, window=args.window)
    man.add(_write(out / "checkpoint.json", res.save))
    text = "\n".join(res.equations) + "\n"
    man.add(_write(out / "equations.txt", lambda p: p.write_text(text)))
    if args.field_csv:
        pts = grid_points(args.field_lo, args.field_hi, args.field_n) if dim == 2 else trajs[0]
        vf = res.model.vector_field(pts)
        path = out / args.field_csv

        def w(p):
            cols = ",".join([f"x{i}" for i in range(dim)] + [f"f{i}" for i in range(dim)])
            np.savetxt(p, np.hstack([pts, vf]), delimiter=",", header=cols, comments="", fmt="%.17g")

        man.add(_write(path, w))
    sys.stdout.write(text)
    print(f"active terms: {res.model.n_active()}")
    if res.failed:
        print(f"discovery failed: {res.message}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --- gradcheck -----------------------------------------------------------------------------


def cmd_gradcheck(args, man: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = _load_spec(args.config)
    if args.loss == "squared":
        target = stream(args.seed, "gradcheck-target").standard_normal((spec.n_steps, spec.dim))
        loss = squared_loss(target)
    else:
        loss = final_value_loss
    with man.phase("gradcheck"):
        report = gradcheck(spec, loss, fd_eps=args.fd_eps, cfg=_qp(args), tol=args.tol)
    man.add(_write(out / "gradcheck.json", lambda p: p.write_text(json.dumps(report, indent=1))))
    print(json.dumps(report, indent=1))
    return EXIT_OK if all(r["pass"] for r in report) else EXIT_NUMERIC


# --- benchmark -----------------------------------------------------------------------------


def noisy_sine(n: int, h: float, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    t = h * np.arange(n)
    clean = np.sin(t)
    return clean, clean + sigma * rng.standard_normal(n)


def shooting_fit(data: np.ndarray, h: float, iterations: int, lr: float, fd_eps: float = 1e-6):
    """Baseline: fit ``u'' + c1 u' + c0 u = 0`` and ``u(0), u'(0)`` by RK4 rollouts.

    The gradient is taken by central finite differences over the four
    parameters (nine rollouts per iteration) and applied with Adam.
    """
    import torch

    n = len(data)
    theta = torch.tensor([0.5, 0.1, 0.0, 0.5], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([theta], lr=lr)

    def loss_of(p):
        c0, c1, u0, v0 = p
        roll = rk4(IvpProblem(2, lambda t, s: np.array([s[1], -c1 * s[1] - c0 * s[0]]), 0.0, [u0, v0], h, n - 1))
        if roll.diverged:
            return float("inf")
        return float(np.mean((roll.y[:, 0] - data) ** 2))

    history = []
    diverged = False
    for _ in range(iterations):
        p = theta.detach().numpy().copy()
        base = loss_of(p)
        if not np.isfinite(base):
            diverged = True
            break
        g = np.zeros(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = fd_eps
            g[i] = (loss_of(p + e) - loss_of(p - e)) / (2 * fd_eps)
        history.append(base)
        opt.zero_grad()
        theta.grad = torch.from_numpy(g)
        opt.step()
    return history, diverged


def neurlp_fit_sine(data: np.ndarray, h: float, iterations: int, lr: float, qp: QpConfig):
    spec = OdeSpec.constant([0.5, 0.1, 1.0], len(data), h, init=[0.0, 0.5], time_invariant=True)
    for ic in spec.init:
        ic.pinned = False
    res = fit(spec, data, ["coeffs", "init"], TrainConfig(iterations=iterations, lr=lr, qp=qp))
    return res.history, res.failed


def run_benchmark(lengths, trials: int, iterations: int, seed: int, h: float = 0.1, sigma: float = 0.1,
                  lr: float = 1e-2, qp: QpConfig | None = None) -> list[dict]:
    """Wall-clock of both fits for each length; rows of a results table."""
    qp = qp or QpConfig()
    # untimed warm-up so one-off import and allocation costs do not land on the first length
    _, warm = noisy_sine(min(lengths), h, sigma, stream(seed, "benchmark-warmup"))
    neurlp_fit_sine(warm, h, 2, lr, qp)
    shooting_fit(warm, h, 2, lr)
    rows = []
    for n in lengths:
        for trial in range(trials):
            rng = stream(seed, f"benchmark-{n}-{trial}")
            _, data = noisy_sine(n, h, sigma, rng)
            t0 = time.perf_counter()
            hist_q, fail_q = neurlp_fit_sine(data, h, iterations, lr, qp)
            t1 = time.perf_counter()
            hist_b, fail_b = shooting_fit(data, h, iterations, lr)
            t2 = time.perf_counter()
            rows.append({
                "length": n, "trial": trial,
                "neurlp_seconds": t1 - t0, "baseline_seconds": t2 - t1,
                "neurlp_loss": hist_q[-1] if hist_q else float("nan"),
                "baseline_loss": hist_b[-1] if hist_b else float("nan"),
                "neurlp_failed": fail_q, "baseline_diverged": fail_b,
                "speedup": (t2 - t1) / (t1 - t0),
            })
    return rows


def growth_ratios(rows: list[dict], stat: str = "min") -> dict:
    """Wall-clock at the longest length divided by that at the shortest, per method.

    Trials are reduced with ``stat`` (``"min"`` or ``"median"``); the minimum
    is the least noisy estimate of the cost on a shared machine.
    """
    reduce = {"min": np.min, "median": np.median}[stat]
    lengths = sorted({r["length"] for r in rows})
    lo, hi = lengths[0], lengths[-1]

    def t(n, key):
        return float(reduce([r[key] for r in rows if r["length"] == n]))

    return {
        "short": lo, "long": hi,
        "neurlp_ratio": t(hi, "neurlp_seconds") / t(lo, "neurlp_seconds"),
        "baseline_ratio": t(hi, "baseline_seconds") / t(lo, "baseline_seconds"),
    }


def cmd_benchmark(args, man: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        lengths = [int(v) for v in args.lengths.split(",") if v]
    except ValueError:
        raise ConfigError(f"bad --lengths {args.lengths!r}") from None
    if not lengths or min(lengths) < 3:
        raise ConfigError("lengths must be integers >= 3")
    with man.phase("benchmark"):
        rows = run_benchmark(lengths, args.trials, args.iterations, args.seed, qp=_qp(args))
    keys = list(rows[0])

    def w(p):
        with open(p, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in rows:
                fh.write(",".join(f"{r[k]:.17g}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")

    man.add(_write(out / "benchmark.csv", w))
    for r in rows:
        print(f"n={r['length']:5d} trial={r['trial']} neurlp={r['neurlp_seconds']:.3f}s "
              f"baseline={r['baseline_seconds']:.3f}s speedup={r['speedup']:.2f} "
              f"loss neurlp={r['neurlp_loss']:.4g} baseline={r['baseline_loss']:.4g}")
    if len(lengths) > 1:
        g = growth_ratios(rows)
        print(f"wall-clock growth {g['short']} -> {g['long']} steps: neurlp x{g['neurlp_ratio']:.2f}, "
              f"baseline x{g['baseline_ratio']:.2f}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurlp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--threads", type=int, default=1, help="worker processes (NEURLP_THREADS overrides)")
        sp.add_argument("--gamma", type=float, default=1.0)
        sp.add_argument("--path", choices=["auto", "dense", "sparse", "iterative"], default="auto")

    s = sub.add_parser("solve", help="solve an ODE spec")
    s.add_argument("--config")
    s.add_argument("--oracle", help="analytic:NAME or rk4")
    s.add_argument("--batch", help="directory of spec JSON files")
    common(s, "out/solve")

    f = sub.add_parser("fit", help="fit spec parameters to data")
    f.add_argument("--config", required=True)
    common(f, "out/fit")

    d = sub.add_parser("discover", help="sparse equation discovery from trajectory CSVs")
    d.add_argument("data", nargs="*")
    d.add_argument("--degree", type=int, default=2)
    d.add_argument("--outer", choices=["identity", "tanh", "rational"], default="identity")
    d.add_argument("--num-degree", type=int, default=2)
    d.add_argument("--den-degree", type=int, default=2)
    d.add_argument("--threshold", type=float, default=0.1)
    d.add_argument("--iterations", type=int, default=2000)
    d.add_argument("--lr", type=float, default=1e-2)
    d.add_argument("--window", type=int, default=10)
    d.add_argument("--step", type=float)
    d.add_argument("--dim", type=int)
    d.add_argument("--list-basis", action="store_true")
    d.add_argument("--field-csv", help="write the learned vector field to this file in --out")
    d.add_argument("--field-lo", type=float, default=-2.0)
    d.add_argument("--field-hi", type=float, default=2.0)
    d.add_argument("--field-n", type=int, default=20)
    common(d, "out/discover")

    g = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    g.add_argument("--config", required=True)
    g.add_argument("--loss", choices=["squared", "final_value"], default="squared")
    g.add_argument("--fd-eps", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-4)
    common(g, "out/gradcheck")

    b = sub.add_parser("benchmark", help="NeuRLP fit vs RK4-shooting fit wall-clock")
    b.add_argument("--lengths", default="40,100,300,500,1000")
    b.add_argument("--trials", type=int, default=1)
    b.add_argument("--iterations", type=int, default=20)
    common(b, "out/benchmark")
    return p


COMMANDS = {"solve": cmd_solve, "fit": cmd_fit, "discover": cmd_discover, "gradcheck": cmd_gradcheck,
            "benchmark": cmd_benchmark}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(command=args.command, argv=argv, config=getattr(args, "config", None), seed=args.seed,
                      out=args.out)
    listing = args.command == "discover" and args.list_basis
    try:
        code = COMMANDS[args.command](args, man)
    except (ConfigError, SpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    man.exit_code = code
    if not listing:
        man.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
