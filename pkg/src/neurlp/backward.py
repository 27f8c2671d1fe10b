"""Gradients of a scalar loss with respect to every ODE parameter.

One extra solve with the forward KKT factorization gives ``(d_z, d_lambda)``
from ``-K [d_z; d_lambda] = [g; 0]``.  The loss gradient with respect to a
nonzero ``A[r, c]`` is ``d_lambda[r] z[c] - lambda[r] d_z[c]`` and with respect to
``beta[r]`` it is ``-d_lambda[r]``; both are scattered into parameter groups
through the system's parameter map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assembly import COEFFS, INIT, PHI, RHS, STEPS, ConstraintSystem, assemble
from .kkt import KktFactor, QpConfig, Solution, solve
from .ode_spec import OdeSpec


@dataclass
class GradientBundle:
    d_coeffs: np.ndarray
    d_rhs: np.ndarray
    d_steps: np.ndarray
    d_init: np.ndarray
    init_index: np.ndarray
    d_phi: list[np.ndarray]
    solution_id: int | None = None
    d_z: np.ndarray | None = field(default=None, repr=False)
    d_lam: np.ndarray | None = field(default=None, repr=False)

    def groups(self) -> dict[str, np.ndarray]:
        out = {"coeffs": self.d_coeffs, "rhs": self.d_rhs, "steps": self.d_steps, "init": self.d_init}
        for k, p in enumerate(self.d_phi):
            out[f"phi{k}"] = p
        return out

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle(
            self.d_coeffs + other.d_coeffs, self.d_rhs + other.d_rhs, self.d_steps + other.d_steps,
            self.d_init + other.d_init, self.init_index, [a + b for a, b in zip(self.d_phi, other.d_phi)],
        )


def adjoint(cs: ConstraintSystem, sol: Solution, g: np.ndarray, cfg: QpConfig | None = None):
    """``(d_z, d_lambda)`` for an incoming gradient ``g`` of length ``n_vars``."""
    factor = sol.factor if sol.factor is not None else KktFactor(cs, cfg or QpConfig())
    g = np.asarray(g, dtype=float)
    if g.shape != (cs.n_vars,):
        raise ValueError(f"gradient length {g.shape} != ({cs.n_vars},)")
    return factor.solve(-g, np.zeros(cs.m))


def grad_matrix_entries(cs: ConstraintSystem, sol: Solution, d_z: np.ndarray, d_lam: np.ndarray) -> np.ndarray:
    """Loss gradient at each stored nonzero of ``A`` (sparse outer products)."""
    return d_lam[cs.rows] * sol.z[cs.cols] - sol.lam[cs.rows] * d_z[cs.cols]


def backward(cs: ConstraintSystem, sol: Solution, g: np.ndarray, cfg: QpConfig | None = None) -> GradientBundle:
    """Scatter the loss gradient ``g = dloss/dz`` into the parameters of ``cs.spec``."""
    spec = cs.spec
    d_z, d_lam = adjoint(cs, sol, g, cfg)
    dA = grad_matrix_entries(cs, sol, d_z, d_lam)
    dbeta = -d_lam

    contrib = dA[cs.pm_entry] * cs.pm_deriv
    d_coeffs = np.zeros(spec.coeffs.size)
    d_steps = np.zeros(spec.n_steps - 1)
    K = len(spec.nonlinear)
    d_phi = np.zeros(K * spec.dim * spec.n_time)
    for group, out in ((COEFFS, d_coeffs), (STEPS, d_steps), (PHI, d_phi)):
        sel = cs.pm_group == group
        np.add.at(out, cs.pm_index[sel], contrib[sel])

    d_rhs = np.zeros(spec.rhs.size)
    sel = cs.beta_group == RHS
    np.add.at(d_rhs, cs.beta_index[sel], dbeta[sel])
    d_init_all = np.zeros(len(spec.init))
    sel = cs.beta_group == INIT
    d_init_all[cs.beta_index[sel]] = dbeta[sel]
    free = np.array([not ic.pinned for ic in spec.init], dtype=bool)

    return GradientBundle(
        d_coeffs=d_coeffs.reshape(spec.coeffs.shape),
        d_rhs=d_rhs.reshape(spec.rhs.shape),
        d_steps=d_steps,
        d_init=d_init_all[free],
        init_index=np.flatnonzero(free),
        d_phi=list(d_phi.reshape(K, spec.dim, spec.n_time)) if K else [],
        solution_id=sol.id,
        d_z=d_z,
        d_lam=d_lam,
    )


# --- finite-difference check ------------------------------------------------

LossFn = Callable[[Solution], tuple[float, np.ndarray]]


def squared_loss(target: np.ndarray) -> LossFn:
    """``1/2 || u - target ||^2`` over the order-0 solution, ``target`` shaped ``(n, dim)``."""
    target = np.asarray(target, dtype=float)

    def fn(sol: Solution):
        lay = sol.layout
        u = sol.state()[:, :, 0].T
        r = u - target.reshape(u.shape)
        g = np.zeros_like(sol.z)
        lay.state_view(g)[:, 0, :, 0] = r.T
        return 0.5 * float(np.sum(r**2)), g

    return fn


def final_value_loss(sol: Solution):
    """Sum over dimensions of the last solution value."""
    g = np.zeros_like(sol.z)
    sol.layout.state_view(g)[:, 0, -1, 0] = 1.0
    return float(np.sum(sol.state()[:, -1, 0])), g


def linear_loss(weights: np.ndarray) -> LossFn:
    """``<weights, z_state>``; ``weights`` has the state-view shape."""

    def fn(sol: Solution):
        g = np.zeros_like(sol.z)
        sol.layout.state_view(g)[...] = weights
        return float(g @ sol.z), g

    return fn


def _set_params(spec: OdeSpec, group: str, flat: np.ndarray) -> OdeSpec:
    out = spec.copy()
    if group == "coeffs":
        out.coeffs = flat.reshape(spec.coeffs.shape)
    elif group == "rhs":
        out.rhs = flat.reshape(spec.rhs.shape)
    elif group == "steps":
        out.steps = flat.copy()
        out.grid = None
    elif group == "init":
        for j, v in zip(np.flatnonzero([not ic.pinned for ic in spec.init]), flat):
            out.init[j].value = float(v)
    elif group.startswith("phi"):
        out.nonlinear[int(group[3:])].phi = flat.reshape(spec.nonlinear[int(group[3:])].phi.shape)
    return out


def _get_params(spec: OdeSpec, group: str) -> np.ndarray:
    if group == "coeffs":
        return spec.coeffs.ravel().copy()
    if group == "rhs":
        return spec.rhs.ravel().copy()
    if group == "steps":
        return spec.steps.copy()
    if group == "init":
        return np.array([ic.value for ic in spec.init if not ic.pinned])
    return spec.nonlinear[int(group[3:])].phi.ravel().copy()


def loss_and_grad(spec: OdeSpec, loss: LossFn, cfg: QpConfig | None = None):
    cs = assemble(spec, drop_zeros=False)
    sol = solve(cs, cfg)
    value, g = loss(sol)
    return value, backward(cs, sol, g, cfg)


def gradcheck(spec: OdeSpec, loss: LossFn, fd_eps: float = 1e-3, cfg: QpConfig | None = None,
              tol: float = 1e-4, atol: float = 1e-8, points: int = 4) -> list[dict]:
    """Compare analytic gradients with central finite differences, per parameter group.

    Parameters
    ----------
    fd_eps : float
        Step, scaled by ``max(1, |p|)`` for each parameter ``p``.
    points : {2, 4}
        Central stencil width: 2 gives an ``O(h^2)`` difference, 4 the
        ``O(h^4)`` five-point formula.  The wider stencil tolerates the larger
        steps needed when the loss is evaluated through an ill-conditioned solve.

    Returns
    -------
    list of dict
        One entry per non-empty group with ``max_rel_err`` defined as
        ``max |analytic - fd| / max(|analytic|_inf, |fd|_inf, atol)``; the floor
        keeps groups whose gradient is numerically zero from reporting noise.
    """
    if points not in (2, 4):
        raise ValueError("points must be 2 or 4")
    stencil = [(1.0, 0.5), (-1.0, -0.5)] if points == 2 else \
        [(1.0, 2 / 3), (-1.0, -2 / 3), (2.0, -1 / 12), (-2.0, 1 / 12)]
    cfg = cfg or QpConfig()
    _, bundle = loss_and_grad(spec, loss, cfg)
    report = []
    for group, analytic in bundle.groups().items():
        analytic = np.asarray(analytic).ravel()
        if analytic.size == 0:
            continue
        base = _get_params(spec, group)
        fd = np.empty_like(base)
        for i in range(base.size):
            h = fd_eps * max(1.0, abs(base[i]))
            acc = 0.0
            for mult, weight in stencil:
                p = base.copy()
                p[i] += mult * h
                cs = assemble(_set_params(spec, group, p), drop_zeros=False)
                acc += weight * loss(solve(cs, cfg))[0]
            fd[i] = acc / h
        scale = max(np.abs(analytic).max(), np.abs(fd).max(), atol)
        err = float(np.abs(analytic - fd).max() / scale)
        report.append({
            "group": group,
            "analytic_norm": float(np.linalg.norm(analytic)),
            "fd_norm": float(np.linalg.norm(fd)),
            "max_rel_err": err,
            "pass": bool(err <= tol),
        })
    return report


def report_json(report: list[dict]) -> str:
    return json.dumps(report, indent=1)
