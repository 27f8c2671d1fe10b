"""Compile an :class:`~neurlp.ode_spec.OdeSpec` into a sparse constraint system.

Column layout (per system)::

    [ state blocks | epsilon | slacks ]

A state block holds ``z[t, i]`` for ``t = 0..n-1`` and derivative order
``i = 0..d``, time-major.  There is one block per (dimension, channel); channel
0 is the solution ``u`` and channel ``k + 1`` the auxiliary variable of
nonlinear term ``k``.

Row order is fixed: equations, initial conditions, forward Taylor, backward
Taylor, central difference.  Every smoothness inequality ``|e| <= eps`` becomes
the two equality rows ``e - eps + xi_plus = 0`` and ``e + eps - xi_minus = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .ode_spec import OdeSpec, SpecError, validate

# parameter groups
COEFFS, STEPS, PHI = 0, 1, 2
GROUP_NAMES = {COEFFS: "coeffs", STEPS: "steps", PHI: "phi"}
# beta sources
NO_SOURCE, RHS, INIT = -1, 0, 1
# row kinds
ROW_EQ, ROW_INIT, ROW_FWD, ROW_BWD, ROW_CD = range(5)


@dataclass(frozen=True)
class Layout:
    dim: int
    order: int
    n: int
    n_channels: int
    n_slack: int

    @property
    def block_size(self) -> int:
        return self.n * (self.order + 1)

    @property
    def n_state(self) -> int:
        return self.dim * self.n_channels * self.block_size

    @property
    def eps_col(self) -> int:
        return self.n_state

    @property
    def slack_start(self) -> int:
        return self.n_state + 1

    @property
    def n_vars(self) -> int:
        return self.n_state + 1 + self.n_slack

    def block(self, dim: int, channel: int = 0) -> int:
        return dim * self.n_channels + channel

    def col(self, dim: int, t, order, channel: int = 0):
        return self.block(dim, channel) * self.block_size + np.asarray(t) * (self.order + 1) + order

    def describe(self, col: int) -> tuple:
        """``('z', dim, t, i)``, ``('nu', dim, k, t, i)``, ``('epsilon',)`` or ``('slack', j)``."""
        if col < 0 or col >= self.n_vars:
            raise IndexError(col)
        if col == self.eps_col:
            return ("epsilon",)
        if col > self.eps_col:
            return ("slack", col - self.slack_start)
        b, rem = divmod(col, self.block_size)
        t, i = divmod(rem, self.order + 1)
        a, c = divmod(b, self.n_channels)
        return ("z", a, t, i) if c == 0 else ("nu", a, c - 1, t, i)

    def state_view(self, x: np.ndarray) -> np.ndarray:
        """View of a column vector as ``(dim, channels, n, order+1)``."""
        return x[: self.n_state].reshape(self.dim, self.n_channels, self.n, self.order + 1)


@dataclass
class ConstraintSystem:
    """Sparse ``A z = beta`` with cost ``delta`` and provenance of every entry.

    ``pm_*`` arrays list (entry, group, flat parameter index, d entry / d parameter)
    contributions; one entry may have several (central-difference rows) and one
    parameter may feed many entries (shared steps, time-invariant coefficients).
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    shape: tuple[int, int]
    beta: np.ndarray
    delta: np.ndarray
    layout: Layout
    row_kind: np.ndarray
    pm_entry: np.ndarray
    pm_group: np.ndarray
    pm_index: np.ndarray
    pm_deriv: np.ndarray
    beta_group: np.ndarray
    beta_index: np.ndarray
    spec: OdeSpec = field(repr=False)
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.shape[0]

    @property
    def n_vars(self) -> int:
        return self.shape[1]

    @property
    def A(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)
        return self._csr

    @property
    def row_offsets(self) -> np.ndarray:
        return np.searchsorted(self.rows, np.arange(self.m + 1))

    def with_beta(self, beta: np.ndarray) -> "ConstraintSystem":
        out = ConstraintSystem(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        out.beta = np.asarray(beta, dtype=float)
        return out


class _Builder:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []
        self.pm = []  # (entry ids, group, index, deriv)
        self.n_entries = 0

    def add(self, rows, cols, vals, group=None, index=None, deriv=None):
        rows, cols, vals = np.broadcast_arrays(*(np.asarray(x) for x in (rows, cols, vals)))
        rows, cols, vals = rows.ravel(), cols.ravel(), vals.ravel().astype(float)
        ids = np.arange(self.n_entries, self.n_entries + rows.size)
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)
        self.n_entries += rows.size
        if group is not None:
            self.param(ids, group, index, deriv)
        return ids

    def param(self, ids, group, index, deriv):
        ids, index, deriv = np.broadcast_arrays(np.asarray(ids), np.asarray(index), np.asarray(deriv, float))
        self.pm.append((ids.ravel(), np.full(ids.size, group), index.ravel(), deriv.ravel()))


def assemble(spec: OdeSpec, drop_zeros: bool = True) -> ConstraintSystem:
    """Build the constraint system of ``spec``.

    With ``drop_zeros`` the zero-valued equation coefficients are left out of
    the sparsity pattern; pass ``False`` when gradients for those coefficients
    are needed.
    """
    errors = validate(spec)
    if errors:
        raise SpecError("; ".join(errors))
    d, n, dim = spec.order, spec.n_steps, spec.dim
    K = len(spec.nonlinear)
    C = K + 1
    nt = spec.n_time
    s = spec.steps

    # smoothness inequality counts per block
    n_fwd = (n - 1) * d
    n_cd = (n - 2) if spec.central_difference and n >= 3 else 0
    n_ineq_block = 2 * n_fwd + n_cd
    n_blocks = dim * C
    n_ineq = n_blocks * n_ineq_block
    n_eq = dim * n
    n_init = len(spec.init)
    m = n_eq + n_init + 2 * n_ineq
    lay = Layout(dim=dim, order=d, n=n, n_channels=C, n_slack=2 * n_ineq)
    if m >= np.iinfo(np.int64).max or lay.n_vars >= np.iinfo(np.int64).max:
        raise OverflowError("constraint system too large")

    bld = _Builder()
    beta = np.zeros(m)
    beta_group = np.full(m, NO_SOURCE)
    beta_index = np.zeros(m, dtype=np.int64)
    row_kind = np.empty(m, dtype=np.int8)

    # equation rows
    A_idx, T_idx = np.meshgrid(np.arange(dim), np.arange(n), indexing="ij")
    eq_row = A_idx * n + T_idx
    tslot = T_idx if nt == n else np.zeros_like(T_idx)
    coeffs = spec.full_coeffs()
    for i in range(d + 1):
        vals = coeffs[:, :, i]
        keep = vals != 0 if drop_zeros else np.ones_like(vals, dtype=bool)
        idx = np.ravel_multi_index((A_idx, tslot, np.full_like(A_idx, i)), spec.coeffs.shape)
        bld.add(eq_row[keep], lay.col(A_idx, T_idx, i)[keep], vals[keep], COEFFS, idx[keep], 1.0)
    for k, term in enumerate(spec.nonlinear):
        vals = np.broadcast_to(term.phi, (dim, n))
        keep = vals != 0 if drop_zeros else np.ones_like(vals, dtype=bool)
        idx = np.ravel_multi_index((np.full_like(A_idx, k), A_idx, tslot), (K, dim, nt))
        cols = lay.block(A_idx, k + 1) * lay.block_size + T_idx * (d + 1)
        bld.add(eq_row[keep], cols[keep], vals[keep], PHI, idx[keep], 1.0)
    beta[:n_eq] = spec.full_rhs().ravel()
    beta_group[:n_eq] = RHS
    beta_index[:n_eq] = np.ravel_multi_index((A_idx, tslot), (dim, nt)).ravel()
    row_kind[:n_eq] = ROW_EQ

    # initial rows
    for j, ic in enumerate(spec.init):
        r = n_eq + j
        bld.add(r, lay.col(ic.dim, 0, ic.order), 1.0)
        beta[r] = ic.value
        beta_group[r] = INIT
        beta_index[r] = j
        row_kind[r] = ROW_INIT

    # smoothness inequalities, ids q = 0..n_ineq-1; rows first_soft + 2q, +1
    first_soft = n_eq + n_init
    blocks = np.arange(n_blocks)[:, None]

    def ineq(q, entries):
        """entries: list of (col, val, [(param_index, deriv), ...])."""
        r_plus = first_soft + 2 * q
        for r in (r_plus, r_plus + 1):
            for col, val, params in entries:
                ids = bld.add(r, col, val)
                for pidx, der in params:
                    pidx_b = np.broadcast_to(pidx, r.shape).ravel()
                    der_b = np.broadcast_to(der, r.shape).ravel()
                    live = der_b != 0
                    bld.param(ids[live], STEPS, pidx_b[live], der_b[live])
        slack = lay.slack_start + 2 * q
        bld.add(r_plus, lay.eps_col, -1.0)
        bld.add(r_plus, slack, 1.0)
        bld.add(r_plus + 1, lay.eps_col, 1.0)
        bld.add(r_plus + 1, slack + 1, -1.0)

    base = blocks * lay.block_size
    for direction in (+1, -1):
        t = np.arange(n - 1)[None, :] if direction > 0 else np.arange(1, n)[None, :]
        t_other = t + direction
        sidx = t if direction > 0 else t - 1
        st = s[sidx]
        off = 0 if direction > 0 else n_blocks * n_fwd
        for j in range(d):
            q = off + (blocks * (n - 1) + (t if direction > 0 else t - 1)) * d + j
            entries = []
            for i in range(j, d + 1):
                sign = float(direction) ** (i - j)
                c = sign / factorial(i - j)
                der = c * i * st ** (i - 1) if i > 0 else 0.0
                entries.append((base + t * (d + 1) + i, c * st**i, [(sidx, der)]))
            der = -j * st ** (j - 1) if j > 0 else 0.0
            entries.append((base + t_other * (d + 1) + j, -(st**j), [(sidx, der)]))
            ineq(q, entries)
    if n_cd:
        t = np.arange(1, n - 1)[None, :]
        s0, s1 = s[t - 1], s[t]
        w = s1 ** (d - 1)
        dw = (d - 1) * s1 ** (d - 2) if d >= 2 else np.zeros_like(s1)
        q = 2 * n_blocks * n_fwd + blocks * n_cd + (t - 1)
        ineq(q, [
            (base + t * (d + 1) + d, (s0 + s1) * w, [(t - 1, w), (t, w + (s0 + s1) * dw)]),
            (base + (t + 1) * (d + 1) + d - 1, -w, [(t, -dw)]),
            (base + (t - 1) * (d + 1) + d - 1, w, [(t, dw)]),
        ])
    row_kind[first_soft:first_soft + 2 * n_blocks * n_fwd] = ROW_FWD
    row_kind[first_soft + 2 * n_blocks * n_fwd:first_soft + 4 * n_blocks * n_fwd] = ROW_BWD
    row_kind[first_soft + 4 * n_blocks * n_fwd:] = ROW_CD

    rows = np.concatenate(bld.rows).astype(np.int64)
    cols = np.concatenate(bld.cols).astype(np.int64)
    vals = np.concatenate(bld.vals)
    order = np.lexsort((cols, rows))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    if bld.pm:
        pm_entry = inv[np.concatenate([p[0] for p in bld.pm])]
        pm_group = np.concatenate([p[1] for p in bld.pm]).astype(np.int8)
        pm_index = np.concatenate([p[2] for p in bld.pm]).astype(np.int64)
        pm_deriv = np.concatenate([p[3] for p in bld.pm])
    else:
        pm_entry = pm_index = np.zeros(0, dtype=np.int64)
        pm_group = np.zeros(0, dtype=np.int8)
        pm_deriv = np.zeros(0)
    delta = np.zeros(lay.n_vars)
    delta[lay.eps_col] = 1.0
    return ConstraintSystem(
        rows=rows[order], cols=cols[order], vals=vals[order], shape=(m, lay.n_vars),
        beta=beta, delta=delta, layout=lay, row_kind=row_kind,
        pm_entry=pm_entry, pm_group=pm_group, pm_index=pm_index, pm_deriv=pm_deriv,
        beta_group=beta_group, beta_index=beta_index, spec=spec,
    )


def epsilon_column(cs: ConstraintSystem) -> int:
    """Index of the unique column with unit cost."""
    hot = np.flatnonzero(cs.delta)
    if hot.size != 1 or cs.delta[hot[0]] != 1.0:
        raise ValueError(f"cost vector must have exactly one unit entry, found {hot.size} nonzeros")
    return int(hot[0])


def refresh_beta(cs: ConstraintSystem, spec: OdeSpec) -> ConstraintSystem:
    """Copy of ``cs`` with right-hand sides and initial values taken from ``spec``.

    Valid only when ``spec`` differs from the assembled one in ``rhs`` and
    initial values alone.
    """
    beta = cs.beta.copy()
    eq = cs.beta_group == RHS
    beta[eq] = spec.rhs.ravel()[cs.beta_index[eq]]
    ini = cs.beta_group == INIT
    if ini.any():
        beta[ini] = np.array([ic.value for ic in spec.init])[cs.beta_index[ini]]
    return cs.with_beta(beta)


def validate_system(cs: ConstraintSystem) -> list[str]:
    """Structural invariants of an assembled system."""
    errors = []
    lay = cs.layout
    counts = np.bincount(cs.cols, minlength=cs.n_vars)
    if np.any(counts == 0):
        errors.append(f"{int(np.sum(counts == 0))} columns without nonzeros")
    hot = np.flatnonzero(cs.delta)
    if hot.size != 1 or hot[0] != lay.eps_col or cs.delta[lay.eps_col] != 1.0:
        errors.append("cost vector must be the unit vector of the epsilon column")
    slack = cs.cols >= lay.slack_start
    if np.any(counts[lay.slack_start:] != 1):
        errors.append("slack column used by more than one row")
    if np.any(np.abs(cs.vals[slack]) != 1.0):
        errors.append("slack entry other than +-1")
    kinds = np.bincount(cs.row_kind, minlength=5)
    if kinds.sum() != cs.m:
        errors.append("row count mismatch")
    if cs.beta.shape != (cs.m,):
        errors.append("beta length mismatch")
    return errors


def dump_system(cs: ConstraintSystem, prefix) -> list[Path]:
    """Write A, beta and delta as Matrix Market files ``<prefix>_{A,beta,delta}.mtx``."""
    prefix = Path(prefix)
    paths = [Path(f"{prefix}_A.mtx"), Path(f"{prefix}_beta.mtx"), Path(f"{prefix}_delta.mtx")]
    scipy.io.mmwrite(paths[0], sp.coo_matrix((cs.vals, (cs.rows, cs.cols)), shape=cs.shape), precision=17)
    scipy.io.mmwrite(paths[1], cs.beta[:, None], precision=17)
    scipy.io.mmwrite(paths[2], cs.delta[:, None], precision=17)
    return paths
