"""Consistency loss tying auxiliary solver variables to nonlinear terms.

A nonlinear term ``phi[a, t] * g_k(state_t)`` enters the linear system as
``phi[a, t] * nu[k, a, t]``.  The solver treats ``nu`` as a free smooth
function; this module measures how far it is from ``g_k`` evaluated on the
solution and supplies the exact gradient with respect to ``z``.
"""

from __future__ import annotations

import numpy as np

from .kkt import Solution
from .ode_spec import OdeSpec


def nonlinear_residual(sol: Solution, spec: OdeSpec) -> tuple[float, np.ndarray]:
    """``(loss, dloss/dz)`` with ``loss = (1/n) sum_{k,a,t} (nu[k,a,t] - g_k(state_t))**2``.

    Parameters
    ----------
    sol : Solution
        Solution of the system assembled from ``spec``.
    spec : OdeSpec
        Must carry at least one nonlinear term.

    Raises
    ------
    ValueError
        If ``spec`` has no nonlinear term or a basis function returns a
        non-finite value.
    """
    if not spec.nonlinear:
        raise ValueError("spec has no nonlinear terms")
    lay = sol.layout
    n = lay.n
    view = lay.state_view(sol.z)
    state = np.transpose(view[:, 0], (1, 0, 2))  # (n, dim, order+1)
    grad = np.zeros_like(sol.z)
    gview = lay.state_view(grad)
    loss = 0.0
    for k, term in enumerate(spec.nonlinear):
        vals = term.basis.gather(state)
        g = term.basis(vals)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"nonlinear term {k} ({term.basis.name()}) is not finite on the solution")
        dg = term.basis.grad(vals) if term.basis.reads else np.zeros((n, 0))
        nu = view[:, k + 1, :, 0]  # (dim, n)
        r = nu - g[None, :]
        loss += float(np.sum(r**2)) / n
        gview[:, k + 1, :, 0] += 2.0 * r / n
        back = -2.0 * r.sum(axis=0) / n  # (n,)
        for j, (a, i) in enumerate(term.basis.reads):
            gview[a, 0, :, i] += back * dg[:, j]
    return loss, grad


def consistency_error(sol: Solution, spec: OdeSpec) -> np.ndarray:
    """Per-term mean squared gap ``mean_t (nu - g_k)^2`` averaged over dimensions."""
    lay = sol.layout
    view = lay.state_view(sol.z)
    state = np.transpose(view[:, 0], (1, 0, 2))
    out = []
    for k, term in enumerate(spec.nonlinear):
        g = term.basis.on_state(state)
        out.append(float(np.mean((view[:, k + 1, :, 0] - g[None, :]) ** 2)))
    return np.array(out)
