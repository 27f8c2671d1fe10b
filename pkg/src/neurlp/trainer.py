"""Gradient-based fitting of ODE parameters and sparse equation discovery.

Both entry points follow the same loop: build the constraint system from the
current parameters, solve it, compare the solution with data, pull the loss
gradient back through :func:`neurlp.backward.backward`, and let a
``torch.optim`` optimizer update the parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .assembly import INIT, RHS, assemble
from .backward import backward
from .basis import BasisFunction, basis_from_dict, builtin_basis, library_matrix, var_names
from .kkt import KktFactor, QpConfig, SolverError, solve
from .nonlinear import nonlinear_residual
from .ode_spec import GridParam, InitCondition, OdeSpec, materialize_steps

FIT_GROUPS = ("coeffs", "rhs", "steps", "init", "phi")


@dataclass
class TrainConfig:
    """Optimization settings shared by :func:`fit` and :func:`discover`.

    ``threshold`` is the sparsity cutoff applied at the fractions of the run
    listed in ``threshold_at``; ``None`` disables thresholding.
    """

    optimizer: str = "adam"
    lr: float = 1e-2
    iterations: int = 2000
    loss: str = "mse"
    noise_sigma: float = 0.0
    threshold: float | None = None
    threshold_at: tuple[float, ...] = (0.5, 0.9)
    seed: int = 0
    nonlinear_weight: float = 1.0
    momentum: float = 0.9
    qp: QpConfig = field(default_factory=QpConfig)

    def __post_init__(self):
        if self.optimizer not in ("plain", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.loss not in ("mse", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def make_optimizer(self, params):
        if self.optimizer == "adam":
            return torch.optim.Adam(params, lr=self.lr)
        if self.optimizer == "momentum":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum)
        return torch.optim.SGD(params, lr=self.lr)


def data_loss(u: np.ndarray, data: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Mean loss over all entries and its gradient with respect to ``u``."""
    r = u - data
    if kind == "mse":
        return float(np.mean(r**2)), 2.0 * r / r.size
    return float(np.mean(np.abs(r))), np.sign(r) / r.size


# --- fitting ----------------------------------------------------------------


@dataclass
class FitResult:
    spec: OdeSpec
    history: list[float]
    failed: bool = False
    message: str = ""
    first_grad_norms: dict[str, float] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else math.nan


class _FitParams:
    """Torch leaves for the learnable groups of a spec."""

    def __init__(self, spec: OdeSpec, which: set[str]):
        self.template = spec.copy()
        self.which = which
        self.free_init = [j for j, ic in enumerate(spec.init) if not ic.pinned]
        t = {}
        if "coeffs" in which:
            t["coeffs"] = spec.coeffs
        if "rhs" in which:
            t["rhs"] = spec.rhs
        if "steps" in which:
            grid = spec.grid or GridParam.from_steps(spec.steps)
            self.template.grid = grid
            t["steps"] = grid.raw
        if "init" in which:
            t["init"] = np.array([spec.init[j].value for j in self.free_init])
        if "phi" in which:
            for k, term in enumerate(spec.nonlinear):
                t[f"phi{k}"] = term.phi
        self.tensors = {k: torch.tensor(np.array(v, dtype=float), dtype=torch.float64, requires_grad=True)
                        for k, v in t.items()}

    def spec(self) -> OdeSpec:
        s = self.template.copy()
        v = {k: p.detach().numpy().copy() for k, p in self.tensors.items()}
        if "coeffs" in v:
            s.coeffs = v["coeffs"]
        if "rhs" in v:
            s.rhs = v["rhs"]
        if "steps" in v:
            s.grid = GridParam(v["steps"], s.grid.scale, s.grid.transform)
            s.steps = materialize_steps(s.grid, s.n_steps)
        if "init" in v:
            for j, val in zip(self.free_init, v["init"]):
                s.init[j].value = float(val)
        for k in range(len(s.nonlinear)):
            if f"phi{k}" in v:
                s.nonlinear[k].phi = v[f"phi{k}"]
        return s

    def set_grads(self, bundle, spec: OdeSpec) -> dict[str, float]:
        grads = {"coeffs": bundle.d_coeffs, "rhs": bundle.d_rhs, "init": bundle.d_init}
        if "steps" in self.tensors:
            grads["steps"] = bundle.d_steps * spec.grid.jacobian()
        for k, p in enumerate(bundle.d_phi):
            grads[f"phi{k}"] = p
        norms = {}
        for k, p in self.tensors.items():
            g = np.asarray(grads[k], dtype=float).reshape(p.shape)
            p.grad = torch.from_numpy(g.copy())
            norms[k] = float(np.linalg.norm(g))
        return norms


def objective(spec: OdeSpec, data: np.ndarray, cfg: TrainConfig | None = None):
    """Training loss of ``spec`` against ``data`` and its gradient bundle.

    The loss is the data loss of the solution plus ``cfg.nonlinear_weight``
    times the consistency loss of the auxiliary variables.

    Raises
    ------
    FloatingPointError
        If the loss is not finite.
    """
    cfg = cfg or TrainConfig()
    data = np.asarray(data, dtype=float).reshape(spec.n_steps, -1)
    cs = assemble(spec, drop_zeros=False)
    sol = solve(cs, cfg.qp)
    u = sol.state()[:, :, 0].T
    loss, du = data_loss(u, data, cfg.loss)
    g = np.zeros_like(sol.z)
    cs.layout.state_view(g)[:, 0, :, 0] = du.T
    if spec.nonlinear and cfg.nonlinear_weight:
        nl, gnl = nonlinear_residual(sol, spec)
        loss += cfg.nonlinear_weight * nl
        g += cfg.nonlinear_weight * gnl
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, backward(cs, sol, g, cfg.qp)


def fit(spec: OdeSpec, data: np.ndarray, which: Sequence[str], cfg: TrainConfig | None = None) -> FitResult:
    """Fit the parameter groups in ``which`` so that the solution follows ``data``.

    Parameters
    ----------
    spec : OdeSpec
        Initial guess; not modified.
    data : array, shape (n_steps,) or (n_steps, dim)
        Target values of ``u`` at the grid points.
    which : subset of {"coeffs", "rhs", "steps", "init", "phi"}
    cfg : TrainConfig

    Returns
    -------
    FitResult
        The OdeSpec with the lowest loss seen.  ``failed`` is set, and the best
        spec so far returned, if a solve fails or the loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    which = set(which)
    unknown = which - set(FIT_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}")
    data = np.asarray(data, dtype=float).reshape(spec.n_steps, -1)
    if data.shape[1] != spec.dim:
        raise ValueError(f"data has {data.shape[1]} columns, spec has dim {spec.dim}")
    rng = np.random.default_rng(cfg.seed)
    params = _FitParams(spec, which)
    opt = cfg.make_optimizer(list(params.tensors.values()))
    history: list[float] = []
    best = (math.inf, spec.copy())
    first: dict[str, float] = {}
    for it in range(cfg.iterations):
        cur = params.spec()
        target = data + cfg.noise_sigma * rng.standard_normal(data.shape) if cfg.noise_sigma else data
        try:
            loss, bundle = objective(cur, target, cfg)
        except (SolverError, FloatingPointError, ValueError, np.linalg.LinAlgError) as e:
            return FitResult(best[1], history, failed=True, message=f"iteration {it}: {e}", first_grad_norms=first)
        history.append(loss)
        if loss < best[0]:
            best = (loss, cur)
        opt.zero_grad()
        norms = params.set_grads(bundle, cur)
        if it == 0:
            first = norms
        opt.step()
    return FitResult(best[1], history, first_grad_norms=first)


def coefficient_ratios(spec: OdeSpec, dim: int = 0) -> np.ndarray:
    """Coefficients divided by the highest-order one (time-averaged)."""
    c = spec.full_coeffs()[dim].mean(axis=0)
    return c / c[-1]


# --- discovery ----------------------------------------------------------------


@dataclass
class DiscoveryModel:
    """``x' = F(Theta(x) xi)`` for a library ``Theta``.

    ``outer`` is ``identity``, ``tanh`` or ``rational``; the rational form is
    ``(Theta(x) xi) / (Theta_q(x) xi_den)`` with the denominator's constant
    weight initialised to one.
    """

    basis: list[BasisFunction]
    xi: np.ndarray
    outer: str = "identity"
    den_basis: list[BasisFunction] = field(default_factory=list)
    xi_den: np.ndarray | None = None
    active_mask: np.ndarray | None = None
    den_mask: np.ndarray | None = None

    DEN_FLOOR = 1e-6

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if self.outer not in ("identity", "tanh", "rational"):
            raise ValueError(f"unknown outer form {self.outer!r}")
        if self.active_mask is None:
            self.active_mask = np.ones(self.xi.shape, dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.outer == "rational":
            if not self.den_basis:
                raise ValueError("rational outer form needs a denominator basis")
            if self.xi_den is None:
                self.xi_den = np.zeros((len(self.den_basis), self.dim))
                const = [i for i, b in enumerate(self.den_basis) if not b.reads]
                if not const:
                    raise ValueError("denominator basis must contain the constant 1")
                self.xi_den[const[0]] = 1.0
            self.xi_den = np.asarray(self.xi_den, dtype=float)
            if self.den_mask is None:
                self.den_mask = np.ones(self.xi_den.shape, dtype=bool)
            self.den_mask = np.asarray(self.den_mask, dtype=bool)
        self.xi = np.where(self.active_mask, self.xi, 0.0)

    @property
    def dim(self) -> int:
        return self.xi.shape[1]

    @classmethod
    def polynomial(cls, degree: int, dim: int, outer: str = "identity", den_degree: int = 0,
                   init_scale: float = 0.0, seed: int = 0) -> "DiscoveryModel":
        basis = builtin_basis(degree, dim)
        rng = np.random.default_rng(seed)
        xi = init_scale * rng.standard_normal((len(basis), dim))
        den = builtin_basis(den_degree, dim) if outer == "rational" else []
        return cls(basis=basis, xi=xi, outer=outer, den_basis=den)

    def library(self, x: np.ndarray) -> np.ndarray:
        return library_matrix(self.basis, x)

    def den_library(self, x: np.ndarray) -> np.ndarray:
        return library_matrix(self.den_basis, x)

    def vector_field(self, x: np.ndarray) -> np.ndarray:
        """``F(Theta(x) xi)`` at points ``x`` of shape ``(N, dim)``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        lin = self.library(x) @ self.xi
        if self.outer == "identity":
            return lin
        if self.outer == "tanh":
            return np.tanh(lin)
        return lin / (self.den_library(x) @ self.xi_den)

    def n_active(self) -> int:
        return int(self.active_mask.sum())

    def equations(self, names: Sequence[str] | None = None, digits: int = 4) -> list[str]:
        """Human-readable equations such as ``x' = -10.0003x + 10.0003y``."""
        names = list(names or var_names(self.dim))
        out = []
        for a in range(self.dim):
            num = _linear_text(self.basis, self.xi[:, a], self.active_mask[:, a], names, digits)
            if self.outer == "tanh":
                rhs = f"tanh({num})"
            elif self.outer == "rational":
                den = _linear_text(self.den_basis, self.xi_den[:, a], self.den_mask[:, a], names, digits)
                rhs = f"({num}) / ({den})"
            else:
                rhs = num
            out.append(f"{names[a]}' = {rhs}")
        return out

    def to_dict(self) -> dict:
        d = {
            "basis": [b.to_dict() for b in self.basis],
            "xi": self.xi.tolist(),
            "outer": self.outer,
            "active_mask": self.active_mask.tolist(),
        }
        if self.outer == "rational":
            d["den_basis"] = [b.to_dict() for b in self.den_basis]
            d["xi_den"] = self.xi_den.tolist()
            d["den_mask"] = self.den_mask.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoveryModel":
        return cls(
            basis=[basis_from_dict(b) for b in d["basis"]],
            xi=np.array(d["xi"], dtype=float),
            outer=d.get("outer", "identity"),
            den_basis=[basis_from_dict(b) for b in d.get("den_basis", [])],
            xi_den=None if d.get("xi_den") is None else np.array(d["xi_den"], dtype=float),
            active_mask=np.array(d["active_mask"], dtype=bool),
            den_mask=None if d.get("den_mask") is None else np.array(d["den_mask"], dtype=bool),
        )


def _linear_text(basis, w, mask, names, digits) -> str:
    parts = []
    for b, c, on in zip(basis, w, mask):
        if not on or c == 0:
            continue
        term = b.name(names)
        mag = f"{abs(c):.{digits}f}"
        body = mag if term == "1" else f"{mag}{term}"
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append(("- " if c < 0 else "+ ") + body)
    return " ".join(parts) if parts else "0"


def threshold(model: DiscoveryModel, tau: float) -> DiscoveryModel:
    """Zero and mask every weight with ``|xi| < tau``; masked entries stay masked."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    mask = model.active_mask & (np.abs(model.xi) >= tau)
    out = DiscoveryModel(
        basis=model.basis, xi=np.where(mask, model.xi, 0.0), outer=model.outer, den_basis=model.den_basis,
        xi_den=None if model.xi_den is None else model.xi_den.copy(), active_mask=mask,
        den_mask=None if model.den_mask is None else model.den_mask.copy(),
    )
    return out


@dataclass
class DiscoveryResult:
    model: DiscoveryModel
    history: list[float]
    equations: list[str]
    failed: bool = False
    message: str = ""
    seed: int = 0

    def checkpoint(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "history": self.history,
            "equations": self.equations,
            "failed": self.failed,
            "message": self.message,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.checkpoint(), indent=1))


def load_checkpoint(path) -> DiscoveryResult:
    d = json.loads(Path(path).read_text())
    return DiscoveryResult(DiscoveryModel.from_dict(d["model"]), d["history"], d["equations"],
                           d.get("failed", False), d.get("message", ""), d.get("seed", 0))


def window_starts(n: int, length: int | None) -> list[int]:
    """Starts of equal-length windows covering ``0..n-1``; neighbours share one point.

    The last window is shifted left to end exactly at ``n - 1``.
    """
    if length is None or length >= n:
        return [0]
    if length < 2:
        raise ValueError("window length must be >= 2")
    starts = list(range(0, n - length + 1, length - 1))
    if starts[-1] != n - length:
        starts.append(n - length)
    return starts


class _Windows:
    """All windows of one trajectory, solved together with one factorization.

    Every window is a first-order system ``u' = rhs`` with ``u`` pinned to the
    data at the window start; the windows differ only in their right-hand
    sides, so they share the matrix and are solved as columns of one batch.
    """

    def __init__(self, x: np.ndarray, steps: np.ndarray, length: int | None, model: DiscoveryModel,
                 qp: QpConfig):
        n, dim = x.shape
        self.starts = window_starts(n, length)
        L = n if len(self.starts) == 1 else int(length)
        if len(self.starts) > 1 and not np.allclose(steps, steps[0]):
            raise ValueError("windowing requires a uniform step")
        self.L, self.dim, self.S = L, dim, len(self.starts)
        self.xw = np.stack([x[s:s + L] for s in self.starts])  # (S, L, dim)
        spec = OdeSpec(
            order=1, n_steps=L, dim=dim,
            coeffs=np.tile([0.0, 1.0], (dim, L, 1)),
            rhs=np.zeros((dim, L)), steps=steps[: L - 1],
            init=[InitCondition(a, 0, 0.0) for a in range(dim)],
        )
        self.cs = assemble(spec)
        self.factor = KktFactor(self.cs, qp)
        eq = self.cs.beta_group == RHS
        self.eq_rows = np.flatnonzero(eq)
        self.eq_dim, self.eq_t = np.divmod(self.cs.beta_index[eq], L)
        ini = np.flatnonzero(self.cs.beta_group == INIT)
        self.beta = np.zeros((self.cs.m, self.S))
        self.beta[ini] = self.xw[:, 0, self.cs.beta_index[ini]].T
        self.delta = np.repeat(self.cs.delta[:, None], self.S, axis=1)
        flat = self.xw.reshape(-1, dim)
        self.theta = torch.from_numpy(model.library(flat))
        self.theta_den = torch.from_numpy(model.den_library(flat)) if model.outer == "rational" else None

    def _u_view(self, z: np.ndarray) -> np.ndarray:
        lay = self.cs.layout
        return z[: lay.n_state].reshape(self.dim, lay.n_channels, self.L, 2, self.S)[:, 0, :, 0, :]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solutions ``(S, L, dim)`` for right-hand sides ``rhs`` of shape ``(S * L, dim)``."""
        r = rhs.reshape(self.S, self.L, self.dim)
        self.beta[self.eq_rows] = r[:, self.eq_t, self.eq_dim].T
        w, _ = self.factor.solve(self.delta, -self.beta)
        return np.transpose(self._u_view(-w), (2, 1, 0))

    def loss_and_rhs_grad(self, rhs: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
        u = self.solve(rhs)
        loss, du = data_loss(u, self.xw, kind)
        g = np.zeros((self.cs.n_vars, self.S))
        self._u_view(g)[...] = np.transpose(du, (2, 1, 0))
        _, d_lam = self.factor.solve(-g, np.zeros((self.cs.m, self.S)))
        d_rhs = np.zeros((self.S, self.L, self.dim))
        d_rhs[:, self.eq_t, self.eq_dim] = -d_lam[self.eq_rows].T
        return loss, d_rhs.reshape(-1, self.dim)


def _fsum_stack(arrays: list[np.ndarray]) -> np.ndarray:
    """Elementwise correctly-rounded sum, independent of the order of ``arrays``."""
    stack = np.stack(arrays)
    flat = stack.reshape(len(arrays), -1)
    return np.array([math.fsum(col) for col in flat.T]).reshape(stack.shape[1:])


class DiscoveryProblem:
    """Loss of a :class:`DiscoveryModel` on a set of trajectories, with gradients.

    The optimizer works on weights ``w`` related to the model weights by a
    per-equation linear map, ``xi[:, a] = T[a] @ w[:, a]``, chosen by
    ``normalize``:

    * ``"whiten"`` -- ``T[a]`` inverts the R factor of a QR decomposition of
      the active library columns, so the optimizer sees orthonormal features;
    * ``"rms"`` -- diagonal scaling by the RMS of each library column;
    * ``"none"`` -- identity.

    For the identity outer form the map also absorbs the RMS of the
    finite-difference derivative of each output.
    """

    def __init__(self, trajectories: Sequence[np.ndarray], model: DiscoveryModel, step,
                 qp: QpConfig | None = None, window: int | None = None, normalize: str = "whiten",
                 loss: str = "mse"):
        qp = qp or QpConfig()
        if normalize not in ("whiten", "rms", "none"):
            raise ValueError(f"unknown normalization {normalize!r}")
        # canonical order: every later reduction (QR whitening, gradient sums)
        # then gives bit-identical results for any ordering of the input
        trajs = sorted((np.ascontiguousarray(x, dtype=float) for x in trajectories),
                       key=lambda x: (x.shape, x.tobytes()))
        if not trajs:
            raise ValueError("need at least one trajectory")
        if not model.basis:
            raise ValueError("empty basis")
        for x in trajs:
            if x.ndim != 2 or x.shape[1] != model.dim or x.shape[0] < 2:
                raise ValueError(f"trajectory shape {x.shape} does not match model dim {model.dim}")
        self.model = model
        self.kind = loss
        self.normalize = normalize
        self.runs = []
        dx = []
        for x in trajs:
            steps = np.broadcast_to(np.asarray(step, dtype=float), (x.shape[0] - 1,)).copy()
            self.runs.append(_Windows(x, steps, window, model, qp))
            dx.append(np.diff(x, axis=0) / steps[:, None])
        self.theta_all = np.concatenate([r.theta.numpy() for r in self.runs])
        self.out_scale = np.ones(model.dim)
        if normalize != "none" and model.outer == "identity":
            self.out_scale = np.sqrt(np.mean(np.concatenate(dx) ** 2, axis=0))
            self.out_scale[self.out_scale == 0] = 1.0

    def transform(self, mask: np.ndarray) -> torch.Tensor:
        """Maps ``T`` of shape ``(dim, K, K)`` for the active set ``mask``."""
        K, dim = mask.shape
        T = np.zeros((dim, K, K))
        n = self.theta_all.shape[0]
        for a in range(dim):
            act = np.flatnonzero(mask[:, a])
            if act.size == 0:
                continue
            cols = self.theta_all[:, act]
            if self.normalize == "whiten":
                R = np.linalg.qr(cols / np.sqrt(n), mode="r")
                sign = np.where(np.diag(R) < 0, -1.0, 1.0)
                R = sign[:, None] * R
                if np.any(np.abs(np.diag(R)) < 1e-12 * max(1.0, np.abs(R).max())):
                    raise ValueError("library columns are linearly dependent on the data")
                sub = np.linalg.inv(R)
            elif self.normalize == "rms":
                rms = np.sqrt(np.mean(cols**2, axis=0))
                sub = np.diag(1.0 / np.where(rms > 0, rms, 1.0))
            else:
                sub = np.eye(act.size)
            T[a][np.ix_(act, act)] = sub * self.out_scale[a]
        return torch.from_numpy(T)

    @staticmethod
    def to_xi(T: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return torch.einsum("akj,ja->ka", T, w)

    @staticmethod
    def to_w(T: torch.Tensor, xi: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_xi` on the active set (least squares on masked blocks)."""
        dim = T.shape[0]
        w = np.zeros_like(xi)
        for a in range(dim):
            Ta = T[a].numpy()
            act = np.flatnonzero(np.any(Ta != 0, axis=0))
            if act.size:
                w[act, a] = np.linalg.solve(Ta[np.ix_(act, act)], xi[act, a])
        return w

    def rhs(self, run: _Windows, xi: torch.Tensor, wd: torch.Tensor | None = None,
            den_mask: torch.Tensor | None = None) -> torch.Tensor:
        lin = run.theta @ xi
        if self.model.outer == "identity":
            return lin
        if self.model.outer == "tanh":
            return torch.tanh(lin)
        q = run.theta_den @ (wd * den_mask)
        if float(q.detach().abs().min()) < DiscoveryModel.DEN_FLOOR:
            raise FloatingPointError("rational denominator collapsed below 1e-6")
        return lin / q

    def loss_and_grads(self, leaves: list[torch.Tensor], T: torch.Tensor,
                       den_mask: torch.Tensor | None = None) -> tuple[float, list[np.ndarray]]:
        """Total loss (sum over trajectories) and gradients for each leaf tensor.

        ``leaves`` is ``[w]`` or, for the rational form, ``[w, xi_den]``.
        """
        losses, grads = [], []
        wd = leaves[1] if len(leaves) > 1 else None
        for run in self.runs:
            rhs_t = self.rhs(run, self.to_xi(T, leaves[0]), wd, den_mask)
            loss, d_rhs = run.loss_and_rhs_grad(rhs_t.detach().numpy(), self.kind)
            if not math.isfinite(loss):
                raise FloatingPointError("non-finite loss")
            gl = torch.autograd.grad(rhs_t, leaves, grad_outputs=torch.from_numpy(d_rhs))
            losses.append(loss)
            grads.append([g.numpy() for g in gl])
        return math.fsum(losses), [_fsum_stack(list(parts)) for parts in zip(*grads)]


def discover(trajectories: Sequence[np.ndarray], model: DiscoveryModel, step: float | np.ndarray,
             cfg: TrainConfig | None = None, window: int | None = None,
             normalize: str = "whiten") -> DiscoveryResult:
    """Learn the weights of ``model`` from sampled trajectories.

    Each trajectory ``x`` (shape ``(n, dim)``) defines ``u' = F(Theta(x_t) xi)``
    with ``u`` pinned to the data at the start; the right-hand side is
    evaluated on the data and refreshed every iteration, so one factorization
    per trajectory serves the whole run.  The loss is the mean squared
    difference between solution and data, summed over trajectories.

    Parameters
    ----------
    window : int, optional
        Split every trajectory into contiguous windows of this many points,
        each starting from the observed state.  All windows are used at every
        iteration.  Long windows make the loss badly conditioned because
        errors in the derivative accumulate along the solve.
    normalize : {"whiten", "rms", "none"}
        Reparameterization seen by the optimizer (see :class:`DiscoveryProblem`).
    """
    cfg = cfg or TrainConfig()
    prob = DiscoveryProblem(trajectories, model, step, cfg.qp, window, normalize, cfg.loss)
    mask = model.active_mask.copy()
    T = prob.transform(mask)
    w = torch.tensor(prob.to_w(T, model.xi), dtype=torch.float64, requires_grad=True)
    leaves = [w]
    den_mask = None
    if model.outer == "rational":
        den_mask = torch.from_numpy(model.den_mask.copy())
        wd = torch.tensor(model.xi_den, dtype=torch.float64, requires_grad=True)
        leaves.append(wd)
    opt = cfg.make_optimizer(leaves)
    thr_iters = {int(f * cfg.iterations) for f in cfg.threshold_at} if cfg.threshold is not None else set()

    def current_model() -> DiscoveryModel:
        xi = np.where(mask, prob.to_xi(T, w.detach()).numpy(), 0.0)
        kw = {}
        if model.outer == "rational":
            kw = dict(xi_den=(wd.detach() * den_mask).numpy(), den_mask=den_mask.numpy().copy())
        return DiscoveryModel(basis=model.basis, xi=xi, outer=model.outer, den_basis=model.den_basis,
                              active_mask=mask.copy(), **kw)

    history: list[float] = []
    for it in range(cfg.iterations):
        if it in thr_iters:
            xi = current_model().xi
            mask &= np.abs(xi) >= cfg.threshold
            T = prob.transform(mask)
            with torch.no_grad():
                w.copy_(torch.from_numpy(prob.to_w(T, np.where(mask, xi, 0.0))))
            opt = cfg.make_optimizer(leaves)
        try:
            loss, grads = prob.loss_and_grads(leaves, T, den_mask)
        except (SolverError, FloatingPointError, np.linalg.LinAlgError) as e:
            cur = current_model()
            return DiscoveryResult(cur, history, cur.equations(), failed=True,
                                   message=f"iteration {it}: {e}", seed=cfg.seed)
        history.append(loss)
        opt.zero_grad()
        for leaf, g in zip(leaves, grads):
            leaf.grad = torch.from_numpy(g)
        if den_mask is not None:
            wd.grad.mul_(den_mask)
        opt.step()
        if den_mask is not None:
            with torch.no_grad():
                wd.mul_(den_mask)
    final = current_model()
    return DiscoveryResult(final, history, final.equations(), seed=cfg.seed)


def cosine_similarity_field(a: np.ndarray, b: np.ndarray) -> float:
    """Mean cosine similarity between two vector fields sampled at the same points."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    return float(np.mean(np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])))


def grid_points(lo: float = -2.0, hi: float = 2.0, n: int = 20) -> np.ndarray:
    g = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


__all__ = [
    "TrainConfig", "FitResult", "objective", "fit", "coefficient_ratios", "DiscoveryModel", "threshold",
    "DiscoveryResult", "DiscoveryProblem", "discover", "window_starts", "load_checkpoint", "cosine_similarity_field", "grid_points",
]
