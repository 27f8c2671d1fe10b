"""Basis functions for nonlinear ODE terms and discovery libraries.

A basis function reads a fixed set of state entries ``(dim, order)`` -- the
value ``u^(order)`` of component ``dim`` -- and maps them to a scalar.  Every
function carries a hand-coded gradient so the consistency loss can be
differentiated exactly.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

Read = tuple[int, int]


def var_names(dim: int) -> list[str]:
    if dim == 1:
        return ["u"]
    if dim <= 3:
        return ["x", "y", "z"][:dim]
    return [f"x{i}" for i in range(dim)]


def _read_name(read: Read, names: Sequence[str]) -> str:
    d, order = read
    return names[d] + "'" * order


class BasisFunction:
    """Scalar function of selected state entries.

    Subclasses implement ``_eval(values)`` and ``_grad(values)`` where
    ``values`` has shape ``(N, len(self.reads))``.
    """

    reads: tuple[Read, ...] = ()

    def _as_2d(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.ndim == 2 and values.shape[1] == len(self.reads):
            return values
        return values.reshape(-1, len(self.reads))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self._eval(self._as_2d(values))

    def grad(self, values: np.ndarray) -> np.ndarray:
        return self._grad(self._as_2d(values))

    def on_state(self, state: np.ndarray) -> np.ndarray:
        """Evaluate on a state array of shape ``(N, dim, order+1)``."""
        return self(self.gather(state))

    def gather(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if not self.reads:
            return np.zeros((state.shape[0], 0))
        return np.stack([state[:, d, i] for d, i in self.reads], axis=1)

    def name(self, names: Sequence[str] | None = None) -> str:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, BasisFunction) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(repr(self.to_dict()))


class Monomial(BasisFunction):
    """Product of powers of state entries; the empty product is the constant 1."""

    def __init__(self, powers: dict[Read, int] | Sequence[tuple[Read, int]] = ()):
        items = dict(powers)
        for read, p in items.items():
            if int(p) != p or p < 0:
                raise ValueError(f"bad exponent {p} for {read}")
        self.powers = {tuple(int(v) for v in r): int(p) for r, p in sorted(items.items()) if p}
        self.reads = tuple(self.powers)
        self._exp = np.array([self.powers[r] for r in self.reads], dtype=float)

    @property
    def degree(self) -> int:
        return int(sum(self.powers.values()))

    def _eval(self, values):
        if not self.reads:
            return np.ones(values.shape[0])
        return np.prod(values ** self._exp, axis=1)

    def _grad(self, values):
        n, k = values.shape
        out = np.empty((n, k))
        for j in range(k):
            e = self._exp.copy()
            coef = e[j]
            e[j] -= 1.0
            out[:, j] = coef * np.prod(values ** e, axis=1)
        return out

    def name(self, names=None) -> str:
        if not self.reads:
            return "1"
        if names is None:
            names = var_names(1 + max(d for d, _ in self.reads))
        parts = []
        for read, p in self.powers.items():
            s = _read_name(read, names)
            parts.append(s if p == 1 else f"{s}^{p}")
        return "".join(parts) if all(len(_read_name(r, names)) == 1 for r in self.reads) else "*".join(parts)

    def to_dict(self) -> dict:
        return {"kind": "monomial", "powers": [[d, i, p] for (d, i), p in self.powers.items()]}


class Tanh(BasisFunction):
    """tanh(scale * inner)."""

    def __init__(self, inner: BasisFunction, scale: float = 1.0):
        self.inner = inner
        self.scale = float(scale)
        self.reads = inner.reads

    def _eval(self, values):
        return np.tanh(self.scale * self.inner._eval(values))

    def _grad(self, values):
        th = np.tanh(self.scale * self.inner._eval(values))
        return ((1.0 - th**2) * self.scale)[:, None] * self.inner._grad(values)

    def name(self, names=None) -> str:
        inner = self.inner.name(names)
        return f"tanh({inner})" if self.scale == 1.0 else f"tanh({self.scale:g}*{inner})"

    def to_dict(self) -> dict:
        return {"kind": "tanh", "scale": self.scale, "inner": self.inner.to_dict()}


class Ratio(BasisFunction):
    """num / den over the union of both reads."""

    def __init__(self, num: BasisFunction, den: BasisFunction):
        self.num = num
        self.den = den
        self.reads = tuple(dict.fromkeys(num.reads + den.reads))
        self._ni = [self.reads.index(r) for r in num.reads]
        self._di = [self.reads.index(r) for r in den.reads]

    def _eval(self, values):
        return self.num._eval(values[:, self._ni]) / self.den._eval(values[:, self._di])

    def _grad(self, values):
        p = self.num._eval(values[:, self._ni])
        q = self.den._eval(values[:, self._di])
        out = np.zeros_like(values)
        out[:, self._ni] += self.num._grad(values[:, self._ni]) / q[:, None]
        out[:, self._di] -= (p / q**2)[:, None] * self.den._grad(values[:, self._di])
        return out

    def name(self, names=None) -> str:
        return f"({self.num.name(names)})/({self.den.name(names)})"

    def to_dict(self) -> dict:
        return {"kind": "ratio", "num": self.num.to_dict(), "den": self.den.to_dict()}


def basis_from_dict(d: dict) -> BasisFunction:
    kind = d.get("kind")
    if kind == "monomial":
        return Monomial({(int(a), int(b)): int(p) for a, b, p in d["powers"]})
    if kind == "tanh":
        return Tanh(basis_from_dict(d["inner"]), d.get("scale", 1.0))
    if kind == "ratio":
        return Ratio(basis_from_dict(d["num"]), basis_from_dict(d["den"]))
    raise ValueError(f"unknown basis kind {kind!r}")


def parse_basis(text: str, dim: int = 1) -> BasisFunction:
    """Parse a monomial written like ``u^2``, ``u*u'``, ``x*y`` or ``1``.

    Variable names follow :func:`var_names`; primes denote derivative order.
    """
    names = var_names(dim)
    text = text.replace(" ", "")
    if text in ("1", ""):
        return Monomial()
    powers: dict[Read, int] = {}
    for factor in text.split("*"):
        base, _, exp = factor.partition("^")
        order = len(base) - len(base.rstrip("'"))
        var = base.rstrip("'")
        if var not in names:
            raise ValueError(f"unknown variable {var!r} in basis {text!r}")
        read = (names.index(var), order)
        powers[read] = powers.get(read, 0) + (int(exp) if exp else 1)
    return Monomial(powers)


def builtin_basis(max_degree: int, dim: int) -> list[Monomial]:
    """All monomials in ``dim`` variables up to total degree ``max_degree``.

    Ordered constant first, then by degree, lexicographic within a degree:
    ``[1, x, y, x^2, xy, y^2, ...]``.
    """
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    out = []
    for deg in range(max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), deg):
            powers: dict[Read, int] = {}
            for d in combo:
                powers[(d, 0)] = powers.get((d, 0), 0) + 1
            out.append(Monomial(powers))
    return out


def library_matrix(basis: Sequence[BasisFunction], x: np.ndarray) -> np.ndarray:
    """Evaluate a library on order-0 samples ``x`` of shape ``(N, dim)``."""
    state = np.asarray(x, dtype=float)[:, :, None]
    return np.stack([b.on_state(state) for b in basis], axis=1)
