"""Independent reference solutions: fixed-step RK4 and closed forms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np


@dataclass
class IvpProblem:
    """``state' = f(t, state)`` from ``state0`` at ``t0`` for ``n_steps`` steps of size ``h``."""

    dim: int
    f: Callable[[float, np.ndarray], np.ndarray]
    t0: float
    state0: np.ndarray
    h: float
    n_steps: int

    def __post_init__(self):
        self.state0 = np.asarray(self.state0, dtype=float).reshape(self.dim)
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")


@dataclass
class Rollout:
    t: np.ndarray
    y: np.ndarray  # (len(t), dim)
    diverged: bool = False


def rk4(p: IvpProblem) -> Rollout:
    """Classical fourth-order Runge-Kutta.

    Returns ``n_steps + 1`` rows, the first being ``state0``.  If the state
    becomes non-finite the rollout stops at the last finite row and
    ``diverged`` is set.
    """
    h = float(p.h)
    y = np.empty((p.n_steps + 1, p.dim))
    y[0] = p.state0
    t = p.t0 + h * np.arange(p.n_steps + 1)
    cur = p.state0.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(p.n_steps):
            ti = t[i]
            k1 = np.asarray(p.f(ti, cur), dtype=float)
            k2 = np.asarray(p.f(ti + h / 2, cur + h / 2 * k1), dtype=float)
            k3 = np.asarray(p.f(ti + h / 2, cur + h / 2 * k2), dtype=float)
            k4 = np.asarray(p.f(ti + h, cur + h * k3), dtype=float)
            cur = cur + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(cur)):
                return Rollout(t[: i + 1], y[: i + 1], diverged=True)
            y[i + 1] = cur
    return Rollout(t, y)


def linear_ode_rhs(coeffs) -> Callable[[float, np.ndarray], np.ndarray]:
    """First-order system for ``sum_i coeffs[i] u^(i) = 0`` with state ``(u, u', ..., u^(d-1))``."""
    c = np.asarray(coeffs, dtype=float)
    d = len(c) - 1

    def f(t, s):
        out = np.empty(d)
        out[:-1] = s[1:]
        out[-1] = -np.dot(c[:-1], s) / c[-1]
        return out

    return f


def lorenz(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0):
    def f(t, s):
        x, y, z = s
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    return f


_ANALYTIC = {
    "sin": (np.sin, np.cos),
    "cos": (np.cos, lambda t: -np.sin(t)),
    "exp": (np.exp, np.exp),
    "damped-sine": (
        lambda t: np.exp(-0.1 * t) * np.sin(t),
        lambda t: np.exp(-0.1 * t) * (np.cos(t) - 0.1 * np.sin(t)),
    ),
    "constant": (np.ones_like, np.zeros_like),
    "cosh": (np.cosh, np.sinh),
}

ANALYTIC_NAMES = tuple(_ANALYTIC)


def analytic(name: str, t, derivative: int = 0) -> np.ndarray:
    """Closed-form value (``derivative=0``) or first derivative of a named test function."""
    if name not in _ANALYTIC:
        raise KeyError(f"unknown analytic case {name!r}; known: {', '.join(ANALYTIC_NAMES)}")
    if derivative not in (0, 1):
        raise ValueError("derivative must be 0 or 1")
    return _ANALYTIC[name][derivative](np.asarray(t, dtype=float))


def write_trajectory(path, t, y) -> None:
    """CSV with header ``t,dim0,dim1,...`` and 17 significant digits."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"dim{i}" for i in range(y.shape[1])])
        for ti, row in zip(np.asarray(t, dtype=float), y):
            w.writerow([f"{ti:.17g}"] + [f"{v:.17g}" for v in row])


def read_trajectory(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_trajectory`; returns ``(t, y)`` with ``y`` shaped ``(n, dim)``."""
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
