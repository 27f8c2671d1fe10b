"""Discretized ODE systems and their parameterization.

An :class:`OdeSpec` describes ``dim`` independent scalar ODEs of order ``d``
on a shared grid of ``n_steps`` points::

    sum_i c[a, t, i] u_a^(i)(t) + sum_k phi_k[a, t] g_k(state_t) = b[a, t]

with per-step sizes ``steps`` (length ``n_steps - 1``) and initial
conditions on orders ``0..d-1`` at the first grid point.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .basis import BasisFunction, basis_from_dict, parse_basis


class SpecError(ValueError):
    """Raised when a problem description cannot be parsed or is invalid."""


@dataclass
class GridParam:
    """Learnable step sizes.

    ``bounded-sigmoid`` maps ``raw`` to ``scale * sigmoid(raw)``, which keeps
    every step inside ``(0, scale)``; ``identity`` uses ``raw`` directly.
    """

    raw: np.ndarray
    scale: float = 0.2
    transform: str = "bounded-sigmoid"

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.transform not in ("bounded-sigmoid", "identity"):
            raise SpecError(f"unknown step transform {self.transform!r}")
        if self.transform == "bounded-sigmoid" and not self.scale > 0:
            raise SpecError("grid scale must be positive")

    @classmethod
    def from_steps(cls, steps, scale: float | None = None) -> "GridParam":
        """Sigmoid parameterization reproducing ``steps``; default scale is twice the largest step."""
        steps = np.asarray(steps, dtype=float)
        if scale is None:
            scale = 2.0 * float(steps.max())
        return cls(raw=logit(steps / scale), scale=scale)

    def jacobian(self) -> np.ndarray:
        """Elementwise d(step)/d(raw)."""
        if self.transform == "identity":
            return np.ones_like(self.raw)
        s = expit(self.raw)
        return self.scale * s * (1.0 - s)

    def to_dict(self) -> dict:
        return {"raw": self.raw.tolist(), "scale": self.scale, "transform": self.transform}


def materialize_steps(g: GridParam, n: int) -> np.ndarray:
    """Step array of length ``n - 1`` produced by a grid parameterization."""
    if n < 2:
        raise SpecError("n_steps < 2")
    raw = np.broadcast_to(np.asarray(g.raw, dtype=float), (n - 1,)).copy()
    if g.transform == "identity":
        if np.any(raw <= 0):
            raise SpecError("identity step transform requires positive raw values")
        return raw
    return g.scale * expit(raw)


@dataclass
class InitCondition:
    """Constraint ``u_dim^(order)(t_1) = value``; ``pinned`` entries are not learned."""

    dim: int
    order: int
    value: float
    pinned: bool = True


@dataclass
class NonlinearTerm:
    """A term ``phi[a, t] * nu_{a,t}`` with ``nu`` tied to ``basis(state_t)`` by a loss."""

    basis: BasisFunction
    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)


@dataclass
class OdeSpec:
    order: int
    n_steps: int
    dim: int
    coeffs: np.ndarray
    rhs: np.ndarray
    steps: np.ndarray
    init: list[InitCondition] = field(default_factory=list)
    nonlinear: list[NonlinearTerm] = field(default_factory=list)
    time_invariant: bool = False
    central_difference: bool = False
    grid: GridParam | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.grid is not None:
            self.steps = materialize_steps(self.grid, self.n_steps)
        self.steps = np.asarray(self.steps, dtype=float)

    @property
    def n_time(self) -> int:
        """Number of distinct coefficient time slots (1 when time-invariant)."""
        return 1 if self.time_invariant else self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.steps)])

    def full_coeffs(self) -> np.ndarray:
        return np.broadcast_to(self.coeffs, (self.dim, self.n_steps, self.order + 1))

    def full_rhs(self) -> np.ndarray:
        return np.broadcast_to(self.rhs, (self.dim, self.n_steps))

    def copy(self) -> "OdeSpec":
        return copy.deepcopy(self)

    @classmethod
    def constant(cls, coeffs, n_steps: int, step: float, init=(), rhs: float = 0.0,
                 time_invariant: bool = False, **kw) -> "OdeSpec":
        """Single-dimension spec with constant coefficients ``coeffs[i]`` for ``u^(i)``.

        ``init`` lists values for orders ``0..len(init)-1``, all pinned.
        """
        c = np.asarray(coeffs, dtype=float)
        nt = 1 if time_invariant else n_steps
        return cls(
            order=len(c) - 1,
            n_steps=n_steps,
            dim=1,
            coeffs=np.tile(c, (1, nt, 1)),
            rhs=np.full((1, nt), float(rhs)),
            steps=np.full(n_steps - 1, float(step)),
            init=[InitCondition(0, i, float(v)) for i, v in enumerate(init)],
            time_invariant=time_invariant,
            **kw,
        )


def validate(spec: OdeSpec) -> list[str]:
    """Return every invariant violation of ``spec``; an empty list means valid."""
    errors: list[str] = []
    d, n, dim = spec.order, spec.n_steps, spec.dim
    if d < 1:
        errors.append("order < 1")
    if n < 2:
        errors.append("n_steps < 2")
    if dim < 1:
        errors.append("dim < 1")
    if errors:
        return errors

    nt = spec.n_time
    if spec.coeffs.shape != (dim, nt, d + 1):
        errors.append(f"coeffs shape {spec.coeffs.shape} != {(dim, nt, d + 1)}")
    elif not np.all(np.isfinite(spec.coeffs)):
        errors.append("non-finite coefficient")
    else:
        dead = np.all(spec.coeffs == 0, axis=2)
        if spec.nonlinear:
            for term in spec.nonlinear:
                if term.phi.shape == (dim, nt):
                    dead &= term.phi == 0
        if np.any(dead):
            a, t = np.argwhere(dead)[0]
            errors.append(f"degenerate equation row (dim {a}, t {t})")
    if spec.rhs.shape != (dim, nt):
        errors.append(f"rhs shape {spec.rhs.shape} != {(dim, nt)}")
    elif not np.all(np.isfinite(spec.rhs)):
        errors.append("non-finite rhs")
    if spec.steps.shape != (n - 1,):
        errors.append(f"steps shape {spec.steps.shape} != {(n - 1,)}")
    elif not np.all(np.isfinite(spec.steps)):
        errors.append("non-finite step")
    elif np.any(spec.steps <= 0):
        errors.append("non-positive step")

    seen = set()
    for ic in spec.init:
        key = (ic.dim, ic.order)
        if not (0 <= ic.dim < dim):
            errors.append(f"initial condition dim {ic.dim} out of range")
        if not (0 <= ic.order < d):
            errors.append(f"initial condition order {ic.order} outside 0..{d - 1}")
        if key in seen:
            errors.append(f"duplicate initial condition {key}")
        if not np.isfinite(ic.value):
            errors.append(f"non-finite initial value {key}")
        seen.add(key)

    for k, term in enumerate(spec.nonlinear):
        if term.phi.shape != (dim, nt):
            errors.append(f"nonlinear term {k} phi shape {term.phi.shape} != {(dim, nt)}")
        for a, i in term.basis.reads:
            if not (0 <= a < dim and 0 <= i <= d):
                errors.append(f"nonlinear term {k} reads ({a}, {i}) outside the state")
    return errors


def check(spec: OdeSpec) -> OdeSpec:
    errors = validate(spec)
    if errors:
        raise SpecError("; ".join(errors))
    return spec


# --- JSON ------------------------------------------------------------------

def spec_to_dict(spec: OdeSpec) -> dict:
    out = {
        "order": spec.order,
        "n_steps": spec.n_steps,
        "dim": spec.dim,
        "coeffs": spec.coeffs.tolist(),
        "rhs": spec.rhs.tolist(),
        "init": [
            {"dim": ic.dim, "order": ic.order, "value": float(ic.value), "pinned": bool(ic.pinned)}
            for ic in spec.init
        ],
        "nonlinear": [{"basis": t.basis.to_dict(), "phi": t.phi.tolist()} for t in spec.nonlinear],
        "time_invariant": spec.time_invariant,
        "central_difference": spec.central_difference,
    }
    if spec.grid is not None:
        out["grid_param"] = spec.grid.to_dict()
    else:
        out["steps"] = spec.steps.tolist()
    return out


def _shaped(value, shape, what):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0 or arr.shape != shape:
        try:
            arr = np.broadcast_to(arr, shape).copy()
        except ValueError:
            raise SpecError(f"{what}: cannot use shape {arr.shape} as {shape}") from None
    return arr


def spec_from_dict(d: dict) -> OdeSpec:
    try:
        order = int(d["order"])
        n = int(d["n_steps"])
        dim = int(d.get("dim", 1))
    except KeyError as e:
        raise SpecError(f"missing field {e.args[0]!r}") from None
    ti = bool(d.get("time_invariant", False))
    nt = 1 if ti else n
    if "coeffs" not in d:
        raise SpecError("missing field 'coeffs'")
    coeffs = np.asarray(d["coeffs"], dtype=float)
    if coeffs.ndim == 1:
        coeffs = np.broadcast_to(coeffs, (dim, nt, order + 1)).copy()
    coeffs = _shaped(coeffs, (dim, nt, order + 1), "coeffs")
    rhs = _shaped(d.get("rhs", 0.0), (dim, nt), "rhs")
    grid = None
    if "grid_param" in d:
        g = d["grid_param"]
        grid = GridParam(raw=np.broadcast_to(np.asarray(g["raw"], float), (n - 1,)).copy(),
                         scale=float(g.get("scale", 0.2)), transform=g.get("transform", "bounded-sigmoid"))
        steps = materialize_steps(grid, n)
    elif "steps" in d:
        steps = _shaped(d["steps"], (n - 1,), "steps")
    else:
        raise SpecError("one of 'steps' or 'grid_param' is required")
    init = [
        InitCondition(int(e.get("dim", 0)), int(e["order"]), float(e["value"]), bool(e.get("pinned", True)))
        for e in d.get("init", [])
    ]
    nonlinear = []
    for e in d.get("nonlinear", []):
        b = e["basis"]
        basis = parse_basis(b, dim) if isinstance(b, str) else basis_from_dict(b)
        nonlinear.append(NonlinearTerm(basis, _shaped(e["phi"], (dim, nt), "phi")))
    return OdeSpec(order=order, n_steps=n, dim=dim, coeffs=coeffs, rhs=rhs, steps=steps, init=init,
                   nonlinear=nonlinear, time_invariant=ti,
                   central_difference=bool(d.get("central_difference", False)), grid=grid)


def dumps(spec: OdeSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=1)


def loads(text: str) -> OdeSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"JSON parse error at line {e.lineno} column {e.colno}: {e.msg}") from None
    return spec_from_dict(data)


def save(spec: OdeSpec, path) -> None:
    Path(path).write_text(dumps(spec))


def load(path) -> OdeSpec:
    return loads(Path(path).read_text())
