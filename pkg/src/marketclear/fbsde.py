"""Coupled forward-backward solver on a scenario tree.

Systems are described per time level by small dense blocks:

    forward   u_F(child) = u_F(v) + dt*(Aff(v) u_F(v) + Afb(v) uB~(v) + af(v))
                           + S(v) dW(child-edge)
    backward  u_B(v)     = uB~(v) + dt*(Bbf(v) u_F(v) + Bbb(v) uB~(v) + bb(v))
    terminal  u_B(leaf)  = G(leaf) u_F(leaf) + g(leaf)

where uB~(v) denotes the conditional expectation of the next-level backward
values (the "pre-driver" value).  Every drift and driver reads backward
states through uB~ and forward states at the current node; this is the exact
first-order-condition structure of the discretized control problems, which is
what lets the clearing identity and the optimality checks hold to round-off.

Two solution paths: a single global sparse solve for affine systems, and a
damped fixed-point iteration of forward/backward sweeps for the general case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError, ValidationError
from .scenario import NoiseLattice

DEFAULT_DAMPING = 0.5
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500


@dataclass
class LevelCoeffs:
    """Affine blocks of one time level; leading axis is 1 (shared) or m (per node)."""

    Aff: np.ndarray   # (m|1, mf, mf)
    Afb: np.ndarray   # (m|1, mf, mb)
    af: np.ndarray    # (m|1, mf)
    S: np.ndarray     # (m|1, mf, d0)
    Bbf: np.ndarray   # (m|1, mb, mf)
    Bbb: np.ndarray   # (m|1, mb, mb)
    bb: np.ndarray    # (m|1, mb)


@dataclass
class FbsdeSystem:
    """A coupled forward-backward system laid out on a noise lattice.

    ``coeffs(k)`` returns the level-k blocks; ``terminal()`` the terminal map
    (G, g) on the leaves.  ``driver_fn``/``terminal_fn`` override the affine
    backward parts for non-affine models (fixed-point path only); ``affine``
    must then be False.
    """

    lattice: NoiseLattice
    forward_slices: dict
    backward_slices: dict
    initial: np.ndarray
    coeffs: Callable[[int], LevelCoeffs]
    terminal: Callable[[], tuple]
    affine: bool = True
    driver_fn: Callable | None = None
    terminal_fn: Callable | None = None

    @property
    def mf(self) -> int:
        return len(self.initial)

    @property
    def mb(self) -> int:
        return max(s.stop for s in self.backward_slices.values())

    def n_unknowns(self) -> int:
        return self.lattice.num_nodes * (self.mf + self.mb)


@dataclass
class SolveDiagnostics:
    method: str
    iterations: int
    max_equation_residual: float
    terminal_mismatch: float
    converged: bool

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "max_equation_residual": self.max_equation_residual,
            "terminal_mismatch": self.terminal_mismatch,
            "converged": self.converged,
        }


@dataclass
class NodeSolution:
    """All forward/backward node values plus the discrete martingale increments.

    ``backward_pre`` holds uB~ (at terminal nodes it repeats the terminal
    values); ``deviations`` holds, per node, the difference between its
    backward value and its parent's uB~ (zero at the root); the
    probability-weighted sum over siblings vanishes by construction.
    """

    system: FbsdeSystem
    forward: np.ndarray
    backward: np.ndarray
    backward_pre: np.ndarray
    deviations: np.ndarray
    diagnostics: SolveDiagnostics

    def field(self, name: str) -> np.ndarray:
        if name in self.system.forward_slices:
            return self.forward[:, self.system.forward_slices[name]]
        return self.backward[:, self.system.backward_slices[name]]

    def pre(self, name: str) -> np.ndarray:
        """Pre-driver conditional expectation of a backward field."""
        return self.backward_pre[:, self.system.backward_slices[name]]

    def z_projection(self, name: str) -> np.ndarray:
        """Discrete martingale-representation diagnostic E[dev dW^T]/dt per node."""
        lat = self.system.lattice
        sl = self.system.backward_slices[name]
        dim = sl.stop - sl.start
        out = np.zeros((lat.num_nodes, dim, lat.d0))
        for k in range(lat.steps):
            lo, hi = lat.level_range(k)
            clo, chi = lat.level_range(k + 1)
            dev = self.deviations[clo:chi, sl].reshape(hi - lo, lat.fanout, dim)
            dw = lat.dW[clo:chi].reshape(hi - lo, lat.fanout, lat.d0)
            w = lat.child_probs[None, :, None, None]
            out[lo:hi] = (w * dev[..., :, None] * dw[..., None, :]).sum(axis=1) / lat.dt
        return out


def backward_step(lattice: NoiseLattice, node: int, child_values: np.ndarray,
                  driver_value: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One conditional-expectation step of a backward state at a single node.

    Returns the node value  sum_c p_c * child_c + dt * driver  and the
    child-wise deviations from the conditional mean (probability-weighted
    mean zero).
    """
    child_values = np.asarray(child_values, dtype=float)
    probs = lattice.child_probs
    if child_values.shape[0] != len(probs):
        raise ValidationError("child_values must cover every child of the node")
    if abs(probs.sum() - 1.0) > 1e-12:
        raise SolverError("lattice corruption: child probabilities do not sum to 1")
    mean = np.tensordot(probs, child_values, axes=(0, 0))
    value = mean + dt * np.asarray(driver_value, dtype=float)
    return value, child_values - mean


def _apply(mat: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """(m|1, p, q) x (m, q) -> (m, p), broadcasting the leading axis."""
    return np.matmul(mat, vec[..., None])[..., 0]


def _forward_sweep(system: FbsdeSystem, ub: np.ndarray) -> np.ndarray:
    lat = system.lattice
    uf = np.zeros((lat.num_nodes, system.mf))
    uf[0] = system.initial
    for k in range(lat.steps):
        lo, hi = lat.level_range(k)
        clo, chi = lat.level_range(k + 1)
        ubt = lat.cond_expect(ub[clo:chi], k)
        c = system.coeffs(k)
        drift = _apply(c.Aff, uf[lo:hi]) + _apply(c.Afb, ubt) + c.af
        base = lat.repeat_to_children(uf[lo:hi] + lat.dt * drift)
        m = hi - lo
        S = np.broadcast_to(c.S, (m,) + c.S.shape[1:])
        S_child = np.repeat(S, lat.fanout, axis=0)
        uf[clo:chi] = base + _apply(S_child, lat.dW[clo:chi])
    return uf


def _backward_sweep(system: FbsdeSystem, uf: np.ndarray):
    lat = system.lattice
    mb = system.mb
    ub = np.zeros((lat.num_nodes, mb))
    pre = np.zeros((lat.num_nodes, mb))
    tsl = lat.terminal_slice
    if system.terminal_fn is not None:
        ub[tsl] = system.terminal_fn(uf[tsl])
    else:
        G, g = system.terminal()
        ub[tsl] = _apply(G, uf[tsl]) + g
    pre[tsl] = ub[tsl]
    for k in range(lat.steps - 1, -1, -1):
        lo, hi = lat.level_range(k)
        clo, chi = lat.level_range(k + 1)
        ubt = lat.cond_expect(ub[clo:chi], k)
        pre[lo:hi] = ubt
        if system.driver_fn is not None:
            driver = system.driver_fn(k, uf[lo:hi], ubt)
        else:
            c = system.coeffs(k)
            driver = _apply(c.Bbf, uf[lo:hi]) + _apply(c.Bbb, ubt) + c.bb
        ub[lo:hi] = ubt + lat.dt * driver
    return ub, pre


def _deviations(system: FbsdeSystem, ub: np.ndarray, pre: np.ndarray) -> np.ndarray:
    lat = system.lattice
    dev = np.zeros_like(ub)
    for k in range(1, lat.steps + 1):
        lo, hi = lat.level_range(k)
        dev[lo:hi] = ub[lo:hi] - lat.repeat_to_children(pre[lat.level_slice(k - 1)])
    return dev


def _package(system: FbsdeSystem, uf, ub, diagnostics) -> NodeSolution:
    _, pre = _backward_sweep_pre_only(system, ub)
    dev = _deviations(system, ub, pre)
    return NodeSolution(system=system, forward=uf, backward=ub,
                        backward_pre=pre, deviations=dev, diagnostics=diagnostics)


def _backward_sweep_pre_only(system: FbsdeSystem, ub: np.ndarray):
    lat = system.lattice
    pre = np.zeros_like(ub)
    pre[lat.terminal_slice] = ub[lat.terminal_slice]
    for k in range(lat.steps - 1, -1, -1):
        pre[lat.level_slice(k)] = lat.cond_expect(ub[lat.level_slice(k + 1)], k)
    return ub, pre


# -- residual ---------------------------------------------------------------


def residual(system: FbsdeSystem, solution: NodeSolution) -> SolveDiagnostics:
    """Recompute every discrete equation row and report the worst violation."""
    lat = system.lattice
    uf, ub = solution.forward, solution.backward
    worst = float(np.max(np.abs(uf[0] - system.initial), initial=0.0))
    for k in range(lat.steps):
        lo, hi = lat.level_range(k)
        clo, chi = lat.level_range(k + 1)
        ubt = lat.cond_expect(ub[clo:chi], k)
        c = system.coeffs(k)
        drift = _apply(c.Aff, uf[lo:hi]) + _apply(c.Afb, ubt) + c.af
        base = lat.repeat_to_children(uf[lo:hi] + lat.dt * drift)
        m = hi - lo
        S = np.broadcast_to(c.S, (m,) + c.S.shape[1:])
        S_child = np.repeat(S, lat.fanout, axis=0)
        fwd_gap = uf[clo:chi] - base - _apply(S_child, lat.dW[clo:chi])
        if system.driver_fn is not None:
            driver = system.driver_fn(k, uf[lo:hi], ubt)
        else:
            driver = _apply(c.Bbf, uf[lo:hi]) + _apply(c.Bbb, ubt) + c.bb
        bwd_gap = ub[lo:hi] - ubt - lat.dt * driver
        worst = max(worst, float(np.max(np.abs(fwd_gap), initial=0.0)),
                    float(np.max(np.abs(bwd_gap), initial=0.0)))
    tsl = lat.terminal_slice
    if system.terminal_fn is not None:
        term_gap = ub[tsl] - system.terminal_fn(uf[tsl])
    else:
        G, g = system.terminal()
        term_gap = ub[tsl] - _apply(G, uf[tsl]) - g
    terminal_mismatch = float(np.max(np.abs(term_gap), initial=0.0))
    worst = max(worst, terminal_mismatch)
    diag = solution.diagnostics
    return SolveDiagnostics(method=diag.method, iterations=diag.iterations,
                            max_equation_residual=worst,
                            terminal_mismatch=terminal_mismatch,
                            converged=diag.converged and worst <= max(DEFAULT_TOL, 1e-9))


# -- direct (global sparse) solve ------------------------------------------


class DirectSolver:
    """Assembles the global sparse system once; re-solves for new constant terms.

    The matrix depends only on the affine blocks (Aff, Afb, Bbf, Bbb, G) and
    the tree; the constant parts (af, bb, g, initial, S dW) live in the right
    hand side, so families of systems differing only in those (e.g. the
    clearing system across candidate major flows) share one factorization.
    """

    def __init__(self, system: FbsdeSystem):
        if not system.affine:
            raise SolverError("direct solve requires an affine system")
        self.system = system
        self._matrix = self._assemble_matrix()
        try:
            self._lu = spla.splu(self._matrix.tocsc())
        except RuntimeError as exc:
            raise SolverError(
                f"global system is singular ({exc}); this signals violated "
                f"monotonicity of the discretized model", None)

    def _assemble_matrix(self) -> sp.csr_matrix:
        sys_, lat = self.system, self.system.lattice
        mf, mb = sys_.mf, sys_.mb
        M = mf + mb
        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r.reshape(-1))
            cols.append(c.reshape(-1))
            vals.append(v.reshape(-1))

        # initial rows
        r0 = np.arange(mf)
        add(r0, r0, np.ones(mf))

        dt = lat.dt
        q = lat.child_probs
        B = lat.fanout
        for k in range(lat.steps + 1):
            lo, hi = lat.level_range(k)
            m = hi - lo
            nodes = np.arange(lo, hi)
            ub_base = nodes * M + mf
            if k < lat.steps:
                c = self.system.coeffs(k)
                clo, chi = lat.level_range(k + 1)
                children = np.arange(clo, chi).reshape(m, B)
                # backward rows at level k (row index == ub unknown index)
                rr = ub_base[:, None] + np.arange(mb)[None, :]              # (m, mb)
                add(rr, rr, np.ones((m, mb)))
                # minus conditional expectation of children, and -dt*Bbb*cond
                Bbb = np.broadcast_to(c.Bbb, (m, mb, mb))
                coef = -(np.eye(mb)[None, :, :] + dt * Bbb)                  # (m, mb, mb)
                child_ub = children[:, :, None] * M + mf + np.arange(mb)[None, None, :]
                # entries: row (v, j) , col (child b, j2), value coef[v,j,j2]*q[b]
                r_idx = np.broadcast_to(rr[:, None, :, None], (m, B, mb, mb))
                c_idx = np.broadcast_to(child_ub[:, :, None, :], (m, B, mb, mb))
                v_idx = coef[:, None, :, :] * q[None, :, None, None]
                add(r_idx, c_idx, np.broadcast_to(v_idx, (m, B, mb, mb)))
                # -dt * Bbf on uf(v)
                Bbf = np.broadcast_to(c.Bbf, (m, mb, mf))
                uf_cols = nodes[:, None] * M + np.arange(mf)[None, :]
                add(np.broadcast_to(rr[:, :, None], (m, mb, mf)),
                    np.broadcast_to(uf_cols[:, None, :], (m, mb, mf)),
                    -dt * Bbf)

                # forward rows for each child
                Aff = np.broadcast_to(c.Aff, (m, mf, mf))
                Afb = np.broadcast_to(c.Afb, (m, mf, mb))
                child_uf = children[:, :, None] * M + np.arange(mf)[None, None, :]  # (m,B,mf)
                r_fwd = child_uf                                             # rows
                add(r_fwd, child_uf, np.ones((m, B, mf)))
                # -(I + dt Aff) on parent uf
                pcoef = -(np.eye(mf)[None, :, :] + dt * Aff)                 # (m, mf, mf)
                add(np.broadcast_to(child_uf[:, :, :, None], (m, B, mf, mf)),
                    np.broadcast_to(uf_cols[:, None, None, :], (m, B, mf, mf)),
                    np.broadcast_to(pcoef[:, None, :, :], (m, B, mf, mf)))
                # -dt * Afb * q_b on sibling ub
                scoef = -dt * Afb[:, None, None, :, :] * q[None, None, :, None, None]
                add(np.broadcast_to(child_uf[:, :, None, :, None], (m, B, B, mf, mb)),
                    np.broadcast_to(child_ub[:, None, :, None, :], (m, B, B, mf, mb)),
                    np.broadcast_to(scoef, (m, B, B, mf, mb)))
            else:
                # terminal rows
                G, _ = self.system.terminal()
                Gb = np.broadcast_to(G, (m, mb, mf))
                rr = ub_base[:, None] + np.arange(mb)[None, :]
                add(rr, rr, np.ones((m, mb)))
                uf_cols = nodes[:, None] * M + np.arange(mf)[None, :]
                add(np.broadcast_to(rr[:, :, None], (m, mb, mf)),
                    np.broadcast_to(uf_cols[:, None, :], (m, mb, mf)),
                    -Gb)

        n = self.system.n_unknowns()
        return sp.csr_matrix((np.concatenate(vals),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def _assemble_rhs(self, system: FbsdeSystem) -> np.ndarray:
        lat = system.lattice
        mf, mb = system.mf, system.mb
        M = mf + mb
        rhs = np.zeros(system.n_unknowns())
        rhs[:mf] = system.initial
        dt = lat.dt
        for k in range(lat.steps):
            lo, hi = lat.level_range(k)
            m = hi - lo
            c = system.coeffs(k)
            nodes = np.arange(lo, hi)
            # backward rows
            bb = np.broadcast_to(c.bb, (m, mb))
            idx = (nodes[:, None] * M + mf + np.arange(mb)[None, :]).reshape(-1)
            rhs[idx] = dt * bb.reshape(-1)
            # forward rows of children
            clo, chi = lat.level_range(k + 1)
            af = np.broadcast_to(c.af, (m, mf))
            S = np.broadcast_to(c.S, (m,) + c.S.shape[1:])
            S_child = np.repeat(S, lat.fanout, axis=0)
            contrib = lat.repeat_to_children(dt * af) + _apply(S_child, lat.dW[clo:chi])
            idx = (np.arange(clo, chi)[:, None] * M + np.arange(mf)[None, :]).reshape(-1)
            rhs[idx] = contrib.reshape(-1)
        tsl = lat.terminal_slice
        _, g = system.terminal()
        tlo, thi = lat.level_range(lat.steps)
        gb = np.broadcast_to(g, (thi - tlo, mb))
        idx = (np.arange(tlo, thi)[:, None] * M + mf + np.arange(mb)[None, :]).reshape(-1)
        rhs[idx] = gb.reshape(-1)
        return rhs

    def solve(self, system: FbsdeSystem | None = None) -> NodeSolution:
        """Solve; pass a sibling system (same matrices, new constants) to reuse the LU."""
        system = system if system is not None else self.system
        rhs = self._assemble_rhs(system)
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("direct solve produced non-finite values (singular pivot)")
        mf, mb = system.mf, system.mb
        M = mf + mb
        per_node = x.reshape(system.lattice.num_nodes, M)
        uf, ub = per_node[:, :mf].copy(), per_node[:, mf:].copy()
        diag = SolveDiagnostics(method="direct", iterations=1,
                                max_equation_residual=0.0, terminal_mismatch=0.0,
                                converged=True)
        sol = _package(system, uf, ub, diag)
        check = residual(system, sol)
        sol.diagnostics = SolveDiagnostics(method="direct", iterations=1,
                                           max_equation_residual=check.max_equation_residual,
                                           terminal_mismatch=check.terminal_mismatch,
                                           converged=check.max_equation_residual <= 1e-10)
        if not sol.diagnostics.converged:
            raise SolverError(
                f"direct solve residual {check.max_equation_residual:.3e} exceeds 1e-10; "
                f"the discrete system is ill-conditioned", sol.diagnostics)
        return sol


def solve_direct(system: FbsdeSystem) -> NodeSolution:
    """Exact solve of an affine system via one global sparse factorization."""
    return DirectSolver(system).solve()


def solve_picard(system: FbsdeSystem, damping: float = DEFAULT_DAMPING,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> NodeSolution:
    """Damped alternation of forward and backward sweeps.

    Stops when the successive-iterate max-norm distance drops below ``tol``;
    a final plain sweep restores the exact sweep relations before packaging.
    """
    if not 0.0 < damping <= 1.0:
        raise ValidationError("damping must lie in (0, 1]")
    if tol <= 0 or max_iter < 1:
        raise ValidationError("tol must be positive and max_iter at least 1")
    lat = system.lattice
    ub = np.zeros((lat.num_nodes, system.mb))
    uf = _forward_sweep(system, ub)
    dist = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        uf_new = _forward_sweep(system, ub)
        ub_new, _ = _backward_sweep(system, uf_new)
        uf_next = damping * uf_new + (1.0 - damping) * uf
        ub_next = damping * ub_new + (1.0 - damping) * ub
        dist = max(float(np.max(np.abs(uf_next - uf), initial=0.0)),
                   float(np.max(np.abs(ub_next - ub), initial=0.0)))
        uf, ub = uf_next, ub_next
        if dist <= tol:
            break
    converged = dist <= tol
    if not converged:
        raise SolverError(
            f"fixed-point iteration did not converge in {max_iter} sweeps "
            f"(last step {dist:.3e}); shorten the horizon/step or check the "
            f"monotonicity margins",
            SolveDiagnostics("picard", iterations, dist, np.nan, False))
    uf = _forward_sweep(system, ub)
    ub, _ = _backward_sweep(system, uf)
    diag = SolveDiagnostics(method="picard", iterations=iterations,
                            max_equation_residual=dist, terminal_mismatch=0.0,
                            converged=True)
    sol = _package(system, uf, ub, diag)
    check = residual(system, sol)
    sol.diagnostics = SolveDiagnostics(method="picard", iterations=iterations,
                                       max_equation_residual=check.max_equation_residual,
                                       terminal_mismatch=check.terminal_mismatch,
                                       converged=True)
    return sol
