"""Forward solve of the relaxed equality-constrained QP.

The QP is::

    minimize   1/2 z^T G z + delta^T z
    subject to A z = beta

with the saddle-point (KKT) system::

    [ G  A^T ] [ -z     ]   [  delta ]
    [ A  0   ] [ lambda ] = [ -beta  ]

``G`` is ``gamma`` on the epsilon and slack columns, ``gamma * state_reg`` on
the solution columns and ``gamma * aux_reg`` on the auxiliary (nonlinear)
columns.  Any positive weight on the solution columns pulls the trajectory
toward zero, hence the zero default.  Slacks and epsilon enter only the smoothness rows, so
they are eliminated exactly (a Schur complement over that block, inverted in
closed form with Sherman-Morrison).  What remains is a saddle system over the
state columns and the equation / initial-condition rows, solved by

* ``dense``: augmented-Lagrangian Cholesky followed by a Cholesky of the
  constraint Schur complement,
* ``sparse``: sparse LU of the reduced saddle matrix,
* ``iterative``: projected conjugate gradient using sparse products only.
"""

from __future__ import annotations

import itertools
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import ConstraintSystem, Layout

log = logging.getLogger(__name__)

_ids = itertools.count()


class SolverError(RuntimeError):
    """Factorization or iteration failure."""


@dataclass
class QpConfig:
    gamma: float = 1.0
    state_reg: float = 0.0
    aux_reg: float = 1e-6
    dense_threshold: int = 2000
    cg_tol: float = 1e-8
    cg_max_iter: int = 20000
    jitter: float = 1e-12
    path: str = "auto"
    preconditioner: str | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.cg_max_iter < 1:
            raise ValueError("cg_max_iter must be >= 1")
        if self.state_reg < 0 or self.aux_reg < 0 or self.jitter < 0:
            raise ValueError("state_reg, aux_reg and jitter must be non-negative")
        if self.path not in ("auto", "dense", "sparse", "iterative"):
            raise ValueError(f"unknown solver path {self.path!r}")
        if self.preconditioner not in (None, "jacobi"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def pick_path(self, n_vars: int) -> str:
        if self.path != "auto":
            return self.path
        return "dense" if n_vars <= self.dense_threshold else "sparse"


@dataclass
class Solution:
    z: np.ndarray
    lam: np.ndarray
    epsilon_value: float
    residual_norm: float
    path: str
    layout: Layout
    converged: bool = True
    iterations: int = 0
    id: int = field(default_factory=lambda: next(_ids))
    factor: "KktFactor | None" = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["factor"] = None
        return state

    def state(self) -> np.ndarray:
        """Solution values ``(dim, n, order+1)``."""
        return self.layout.state_view(self.z)[:, 0]

    def trajectory(self, dim: int = 0, order: int = 0) -> np.ndarray:
        return self.layout.state_view(self.z)[dim, 0, :, order]

    def aux(self, k: int, dim: int = 0) -> np.ndarray:
        """Auxiliary variable of nonlinear term ``k``, shape ``(n, order+1)``."""
        return self.layout.state_view(self.z)[dim, k + 1]


class KktFactor:
    """Factorized KKT operator of one constraint system.

    ``solve(r_x, r_y)`` returns ``(x, y)`` with ``K [x; y] = [r_x; r_y]``.
    """

    def __init__(self, cs: ConstraintSystem, cfg: QpConfig):
        self.cfg = cfg
        self.layout = cs.layout
        gamma = cfg.gamma
        ns = cs.layout.n_state
        A = cs.A.tocsr()
        aux_rows = np.unique(cs.rows[cs.cols >= ns])
        soft = np.zeros(cs.m, dtype=bool)
        soft[aux_rows] = True
        self.hard_idx = np.flatnonzero(~soft)
        self.soft_idx = np.flatnonzero(soft)
        self.H = A[self.hard_idx][:, :ns].tocsr()
        if A[self.hard_idx][:, ns:].nnz:
            raise SolverError("hard rows must not touch epsilon or slack columns")
        self.J = A[self.soft_idx][:, :ns].tocsr()
        P = A[self.soft_idx][:, ns:].tocsr()
        self.P = P
        # each soft row: one epsilon entry (column 0 of P) and one private slack
        self.sigma = P[:, 0].toarray().ravel()
        slack = P[:, 1:].tocsc()
        if np.any(np.diff(slack.indptr) != 1) or slack.nnz != len(self.soft_idx):
            raise SolverError("each slack must appear in exactly one smoothness row")
        lam_diag = np.asarray(slack.multiply(slack).sum(axis=1)).ravel()
        if np.any(lam_diag == 0):
            raise SolverError("smoothness row without slack")
        self.inv_lam = 1.0 / lam_diag
        self.sm_denom = 1.0 + float(np.sum(self.sigma**2 * self.inv_lam))
        self.gp = np.full(cs.n_vars - ns, gamma)
        self.gs = state_weights(cs.layout, cfg)

        Jl = sp.diags(self.inv_lam) @ self.J
        v = np.asarray(self.J.T @ (self.inv_lam * self.sigma)).ravel()
        M = gamma * (self.J.T @ Jl) + sp.diags(self.gs)
        if np.any(v != 0):
            vs = sp.csr_matrix(v)
            M = M - (gamma / self.sm_denom) * (vs.T @ vs)
        self.M = M.tocsr()
        self.n_state = ns
        self.n_hard = len(self.hard_idx)
        self.path = cfg.pick_path(cs.n_vars)
        getattr(self, f"_factor_{self.path}")()

    # D^{-1} = gamma (L^-1 - L^-1 s s^T L^-1 / (1 + s^T L^-1 s)), L = diag(slack^2)
    def _dinv(self, x):
        il = self.inv_lam if x.ndim == 1 else self.inv_lam[:, None]
        sg = self.sigma if x.ndim == 1 else self.sigma[:, None]
        w = il * x
        return self.cfg.gamma * (w - il * sg * (self.sigma @ w) / self.sm_denom)

    # --- reduced solvers -----------------------------------------------------
    def _factor_dense(self):
        M = self.M.toarray()
        H = self.H.toarray()
        HtH = H.T @ H
        scale = np.abs(M).max() / max(np.abs(HtH).max(), 1e-300)
        self.kappa = max(scale, 1.0)
        Mk = M + self.kappa * HtH
        self.cM = self._cholesky(Mk)
        X = la.cho_solve(self.cM, H.T)
        self.cS = self._cholesky(H @ X)
        self.Hd = H

    def _cholesky(self, mat):
        mat = 0.5 * (mat + mat.T)
        jitter = 0.0
        for k in range(6):
            try:
                return la.cho_factor(mat + jitter * np.eye(len(mat)) if jitter else mat, check_finite=True)
            except la.LinAlgError:
                jitter = self.cfg.jitter * 10.0**k * max(1.0, np.abs(np.diag(mat)).max())
                log.debug("Cholesky failed, retrying with jitter %.3g", jitter)
        raise SolverError("Cholesky factorization failed after maximum jitter")

    def _solve_dense(self, rhs1, rh):
        rk = rhs1 + self.kappa * (self.Hd.T @ rh)
        y = la.cho_solve(self.cM, rk)
        bh = la.cho_solve(self.cS, self.Hd @ y - rh)
        x = la.cho_solve(self.cM, rk - self.Hd.T @ bh)
        return x, bh, True, 0

    def _factor_sparse(self):
        K = sp.bmat([[self.M, self.H.T], [self.H, None]], format="csc")
        try:
            self.lu = spla.splu(K)
        except RuntimeError as e:
            raise SolverError(f"sparse LU failed: {e}") from None

    def _solve_sparse(self, rhs1, rh):
        sol = self.lu.solve(np.concatenate([rhs1, rh]))
        if not np.all(np.isfinite(sol)):
            raise SolverError("sparse LU produced non-finite values")
        return sol[: self.n_state], sol[self.n_state:], True, 0

    def _factor_iterative(self):
        if self.cfg.preconditioner == "jacobi":
            dg = self.M.diagonal()
            self.wdiag = 1.0 / np.where(dg > 0, dg, 1.0)
        else:
            self.wdiag = np.ones(self.n_state)
        HW = self.H @ sp.diags(self.wdiag)
        self.proj_lu = spla.splu((HW @ self.H.T).tocsc())

    def _project(self, r):
        """``(g, r')``: projected, preconditioned residual and ``r`` with its normal component removed.

        Replacing ``r`` by ``r'`` every step keeps round-off in the constraint
        normals from accumulating (residual replacement).
        """
        mu = self.proj_lu.solve(self.H @ (self.wdiag * r))
        r = r - self.H.T @ mu
        return self.wdiag * r, r

    def _solve_iterative(self, rhs1, rh):
        M, H = self.M, self.H
        x = self.wdiag * (H.T @ self.proj_lu.solve(rh))
        r = M @ x - rhs1
        g, r = self._project(r)
        p = -g
        rg = r @ g
        ref = max(np.sqrt(abs(rg)), 1e-300)
        converged = False
        it = 0
        for it in range(1, self.cfg.cg_max_iter + 1):
            if np.sqrt(abs(rg)) <= self.cfg.cg_tol * ref:
                converged = True
                break
            Mp = M @ p
            curv = p @ Mp
            if curv <= 0:
                break
            alpha = rg / curv
            x = x + alpha * p
            r = r + alpha * Mp
            g, r = self._project(r)
            rg_new = r @ g
            p = -g + (rg_new / rg) * p
            rg = rg_new
        else:
            converged = np.sqrt(abs(rg)) <= self.cfg.cg_tol * ref
        resid = rhs1 - M @ x
        bh = self.proj_lu.solve(H @ (self.wdiag * resid))
        if not converged:
            warnings.warn(f"projected CG did not converge in {it} iterations", RuntimeWarning)
        return x, bh, converged, it

    # --- full system -----------------------------------------------------------
    def solve(self, r_x: np.ndarray, r_y: np.ndarray):
        """Solve for one right-hand side, or several stacked as columns."""
        if r_x.ndim == 2 and self.path == "iterative":
            cols = [self.solve(r_x[:, j], r_y[:, j]) for j in range(r_x.shape[1])]
            return np.stack([c[0] for c in cols], axis=1), np.stack([c[1] for c in cols], axis=1)
        ns = self.n_state
        gp = self.gp if r_x.ndim == 1 else self.gp[:, None]
        rS, rP = r_x[:ns], r_x[ns:]
        rh, rs = r_y[self.hard_idx], r_y[self.soft_idx]
        t = self.P @ (rP / gp) - rs
        rhs1 = rS - self.J.T @ self._dinv(t)
        aS, bh, ok, it = getattr(self, f"_solve_{self.path}")(rhs1, rh)
        bs = self._dinv(self.J @ aS + t)
        aP = (rP - self.P.T @ bs) / gp
        x = np.concatenate([aS, aP])
        y = np.empty(r_y.shape)
        y[self.hard_idx] = bh
        y[self.soft_idx] = bs
        self.last_converged, self.last_iterations = ok, it
        return x, y

    def apply_g(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        out[: self.n_state] = self.gs * x[: self.n_state]
        out[self.n_state:] = self.gp * x[self.n_state:]
        return out


def state_weights(layout: Layout, cfg: QpConfig) -> np.ndarray:
    """Diagonal of ``G`` over the state columns."""
    w = np.empty((layout.dim, layout.n_channels, layout.block_size))
    w[:, 0] = cfg.gamma * cfg.state_reg
    w[:, 1:] = cfg.gamma * cfg.aux_reg
    return w.ravel()


def factorize(cs: ConstraintSystem, cfg: QpConfig | None = None) -> KktFactor:
    return KktFactor(cs, cfg or QpConfig())


def solve(cs: ConstraintSystem, cfg: QpConfig | None = None, factor: KktFactor | None = None) -> Solution:
    """Solve the relaxed QP of ``cs``.

    ``factor`` may be reused when only ``cs.beta`` changed since it was built.
    """
    cfg = cfg or QpConfig()
    if factor is None:
        factor = KktFactor(cs, cfg)
    w, lam = factor.solve(cs.delta, -cs.beta)
    z = -w
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
        raise SolverError("non-finite solution")
    res = float(np.linalg.norm(cs.A @ z - cs.beta))
    return Solution(
        z=z, lam=lam, epsilon_value=float(z[cs.layout.eps_col]), residual_norm=res, path=factor.path,
        layout=cs.layout, converged=factor.last_converged, iterations=factor.last_iterations, factor=factor,
    )


def kkt_residuals(cs: ConstraintSystem, sol: Solution, cfg: QpConfig | None = None) -> tuple[float, float]:
    """Sup norms of the stationarity and feasibility residuals."""
    cfg = cfg or QpConfig()
    g = np.full(cs.n_vars, cfg.gamma)
    g[: cs.layout.n_state] = state_weights(cs.layout, cfg)
    stat = g * (-sol.z) + cs.A.T @ sol.lam - cs.delta
    feas = cs.A @ sol.z - cs.beta
    return float(np.abs(stat).max()), float(np.abs(feas).max())


def _solve_quiet(args):
    cs, cfg = args
    try:
        sol = solve(cs, cfg)
        sol.factor = None
        return sol
    except (SolverError, ValueError, np.linalg.LinAlgError) as e:
        return SolverError(str(e))


def default_workers() -> int:
    env = os.environ.get("NEURLP_THREADS")
    if env:
        return max(1, int(env))
    return 1


def solve_batch(systems, cfg: QpConfig | None = None, workers: int | None = None) -> list:
    """Solve independent systems, preserving order.

    Failed elements are returned as :class:`SolverError` instances in place.
    """
    cfg = cfg or QpConfig()
    workers = workers or cfg.workers or 1
    jobs = [(cs, cfg) for cs in systems]
    if workers <= 1 or len(jobs) <= 1:
        return [_solve_quiet(j) for j in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_solve_quiet, jobs, chunksize=chunk))
