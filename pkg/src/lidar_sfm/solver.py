"""Damped least squares over pose and vector parameter blocks.

A problem is a mapping of named parameter groups plus a list of
:class:`ResidualTerm`. Each term evaluates a stack of ``m`` residual vectors of
size ``k`` and, on request, Jacobian blocks ``(group, block_index, J)`` with
``J`` of shape ``(m, k, local_dim)``. Pose blocks are updated on the right,
``T <- T Exp(delta)``, with ``delta`` ordered (omega, v).

Huber robustification is applied to the norm of each residual vector, and the
total cost is ``sum_terms weight * sum_rows rho(|r|^2)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import kernels
from .geom import se3_exp

log = logging.getLogger(__name__)

DENSE_LIMIT = 3000


class PoseParams:
    """Stack of SE(3) blocks stored as rotation matrices and translations."""

    dim = 6
    eliminate = False

    def __init__(self, R, t, constant=None):
        self.R = np.array(R, dtype=np.float64).reshape(-1, 3, 3)
        self.t = np.array(t, dtype=np.float64).reshape(-1, 3)
        n = len(self.R)
        self.constant = np.zeros(n, bool) if constant is None else np.array(constant, bool).reshape(n)

    def __len__(self):
        return len(self.R)

    def retract(self, delta):
        dR, dt = se3_exp(delta)
        R = self.R @ dR
        t = self.t + np.einsum("nij,nj->ni", self.R, dt)
        return PoseParams(R, t, self.constant)

    def norm(self):
        return float(np.linalg.norm(self.t))

    def copy(self):
        return PoseParams(self.R.copy(), self.t.copy(), self.constant.copy())


class VectorParams:
    """Stack of Euclidean blocks. ``eliminate`` marks Schur-eliminable blocks."""

    def __init__(self, values, constant=None, eliminate=False):
        v = np.array(values, dtype=np.float64)
        self.values = v.reshape(len(v), -1) if v.ndim != 2 else v
        n = len(self.values)
        self.dim = self.values.shape[1]
        self.constant = np.zeros(n, bool) if constant is None else np.array(constant, bool).reshape(n)
        self.eliminate = eliminate

    def __len__(self):
        return len(self.values)

    def retract(self, delta):
        return VectorParams(self.values + delta, self.constant, self.eliminate)

    def norm(self):
        return float(np.linalg.norm(self.values))

    def copy(self):
        return VectorParams(self.values.copy(), self.constant.copy(), self.eliminate)


@dataclass
class ResidualTerm:
    name: str
    evaluate: Callable
    weight: float = 1.0
    huber: float | None = None


@dataclass
class SolverOptions:
    max_iterations: int = 100
    function_tolerance: float = 1e-12
    gradient_tolerance: float = 1e-12
    parameter_tolerance: float = 1e-14
    initial_damping: float = 1e-4
    max_damping: float = 1e16
    min_diagonal: float = 1e-6
    max_diagonal: float = 1e32
    dense_limit: int = DENSE_LIMIT


@dataclass
class SolverResult:
    params: dict
    initial_cost: float
    final_cost: float
    cost_trace: list
    iterations: int
    termination: str
    gradient_norm: float
    term_costs: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.termination in (
            "function_tolerance",
            "gradient_tolerance",
            "parameter_tolerance",
            "zero_cost",
            "no_free_parameters",
            "damping_limit",
        )


class SolverError(RuntimeError):
    pass


def robust_rho(s2, delta):
    """Huber on the residual norm; returns (rho, rho') as functions of s^2."""
    if delta is None or not np.isfinite(delta):
        return s2, np.ones_like(s2)
    s = np.sqrt(s2)
    inlier = s <= delta
    rho = np.where(inlier, s2, 2.0 * delta * s - delta * delta)
    drho = np.where(inlier, 1.0, delta / np.maximum(s, 1e-300))
    return rho, drho


def term_cost(term, r):
    s2 = np.sum(r * r, axis=1)
    rho, _ = robust_rho(s2, term.huber)
    return float(term.weight * np.sum(rho))


def evaluate_cost(params, terms):
    costs = {}
    for term in terms:
        r, _ = term.evaluate(params, False)
        costs[term.name] = costs.get(term.name, 0.0) + term_cost(term, r)
    return float(sum(costs.values())), costs


class _Layout:
    """Column bookkeeping for free blocks of every group."""

    def __init__(self, params):
        self.names = list(params)
        self.offsets = {}
        self.index = {}
        reduced = 0
        elim_groups = [n for n in self.names if params[n].eliminate]
        if len(elim_groups) > 1:
            raise SolverError("at most one eliminated group is supported")
        self.elim = elim_groups[0] if elim_groups else None
        for name in self.names:
            if name == self.elim:
                continue
            g = params[name]
            free = ~g.constant
            idx = np.full(len(g), -1, dtype=np.int64)
            idx[free] = np.arange(free.sum())
            self.index[name] = idx
            self.offsets[name] = reduced
            reduced += int(free.sum()) * g.dim
        self.n_reduced = reduced
        self.n_elim = 0
        self.elim_dim = 0
        if self.elim is not None:
            g = params[self.elim]
            free = ~g.constant
            idx = np.full(len(g), -1, dtype=np.int64)
            idx[free] = np.arange(free.sum())
            self.index[self.elim] = idx
            self.offsets[self.elim] = 0
            self.n_elim = int(free.sum())
            self.elim_dim = g.dim

    @property
    def n_total(self):
        return self.n_reduced + self.n_elim * self.elim_dim

    def columns(self, name, blocks, dim):
        """Absolute column indices (within the group's space) and a validity mask."""
        local = self.index[name][blocks]
        ok = local >= 0
        cols = self.offsets[name] + local[:, None] * dim + np.arange(dim)
        return cols, ok


class _System:
    """Normal equations split into reduced (dense) and eliminated (block-diagonal) parts."""

    def __init__(self, layout):
        self.layout = layout
        nr = layout.n_reduced
        self.Hrr = np.zeros((nr, nr))
        self.gr = np.zeros(nr)
        ne, d = layout.n_elim, layout.elim_dim
        self.C = np.zeros((ne, d, d))
        self.ge = np.zeros(ne * d)
        self.B_rows = []
        self.B_cols = []
        self.B_vals = []

    def add_term(self, r, entries, scale):
        L = self.layout
        rs = r * scale[:, None]
        red_J, red_cols, elim = [], [], []
        for name, blocks, J in entries:
            Js = J * scale[:, None, None]
            cols, ok = L.columns(name, np.asarray(blocks), J.shape[2])
            if name == L.elim:
                elim.append((cols, ok, Js))
            else:
                red_J.append(Js)
                red_cols.append(np.where(ok[:, None], cols, -1))
        if red_J:
            Jr = np.concatenate(red_J, axis=2) if len(red_J) > 1 else red_J[0]
            cr = np.concatenate(red_cols, axis=1) if len(red_cols) > 1 else red_cols[0]
            kernels.accumulate_normal(self.Hrr, self.gr, np.ascontiguousarray(Jr), np.ascontiguousarray(cr),
                                      np.ascontiguousarray(rs))
        d = L.elim_dim
        for a, (ce, oke, Je) in enumerate(elim):
            if a:
                raise SolverError("a residual touches two eliminated blocks")
            g = np.einsum("mkd,mk->md", Je[oke], rs[oke])
            np.add.at(self.ge, ce[oke].ravel(), g.ravel())
            np.add.at(self.C, ce[oke][:, 0] // d, np.einsum("mki,mkj->mij", Je[oke], Je[oke]))
            for Jr_, cr_ in zip(red_J, red_cols):
                both = oke & (cr_[:, 0] >= 0)
                if not np.any(both):
                    continue
                blk = np.einsum("mki,mkj->mij", Jr_[both], Je[both])
                self.B_rows.append(np.broadcast_to(cr_[both][:, :, None], blk.shape).ravel())
                self.B_cols.append(np.broadcast_to(ce[both][:, None, :], blk.shape).ravel())
                self.B_vals.append(blk.ravel())

    def finalize(self):
        L = self.layout
        ne = L.n_elim * L.elim_dim
        if self.B_rows:
            self.B = sp.csr_matrix(
                (np.concatenate(self.B_vals), (np.concatenate(self.B_rows), np.concatenate(self.B_cols))),
                shape=(L.n_reduced, ne),
            )
        else:
            self.B = sp.csr_matrix((L.n_reduced, ne))

    def gradient(self):
        return np.concatenate([self.gr, self.ge])

    def diagonal(self):
        d = self.layout.elim_dim
        diag_e = np.einsum("nii->ni", self.C).ravel() if d else np.zeros(0)
        return np.concatenate([np.diag(self.Hrr), diag_e])

    def hess_vec(self, x):
        nr = self.layout.n_reduced
        d = self.layout.elim_dim
        xr, xe = x[:nr], x[nr:]
        out_r = self.Hrr @ xr + self.B @ xe
        out_e = self.B.T @ xr
        if d:
            out_e = out_e + np.einsum("nij,nj->ni", self.C, xe.reshape(-1, d)).ravel()
        return np.concatenate([out_r, out_e])

    def solve(self, damping_diag, dense_limit):
        """Solve (H + diag(damping_diag)) x = -g. Raises LinAlgError when singular."""
        L = self.layout
        nr = L.n_reduced
        d = L.elim_dim
        g = self.gradient()
        Dr = damping_diag[:nr]
        De = damping_diag[nr:]
        if L.n_elim == 0 or L.n_total <= dense_limit:
            H = np.zeros((L.n_total, L.n_total))
            H[:nr, :nr] = self.Hrr
            if L.n_elim:
                Bd = self.B.toarray()
                H[:nr, nr:] = Bd
                H[nr:, :nr] = Bd.T
                idx = nr + np.arange(L.n_elim)[:, None] * d + np.arange(d)
                H[idx[:, :, None], idx[:, None, :]] = self.C
            H[np.diag_indices_from(H)] += damping_diag
            c = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
            x = scipy.linalg.cho_solve(c, -g, check_finite=False)
            if not np.all(np.isfinite(x)):
                raise np.linalg.LinAlgError("non-finite step")
            return x
        C = self.C.copy()
        C[:, np.arange(d), np.arange(d)] += De.reshape(-1, d)
        Cinv = np.linalg.inv(C)
        ge = self.ge
        Cinv_sp = sp.block_diag(list(Cinv), format="csr")
        BCinv = self.B @ Cinv_sp
        S = self.Hrr.copy()
        S[np.diag_indices_from(S)] += Dr
        S -= (BCinv @ self.B.T).toarray()
        rhs = -self.gr + BCinv @ ge
        if nr:
            c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
            xr = scipy.linalg.cho_solve(c, rhs, check_finite=False)
        else:
            xr = np.zeros(0)
        xe = -np.einsum("nij,nj->ni", Cinv, (ge + self.B.T @ xr).reshape(-1, d)).ravel()
        x = np.concatenate([xr, xe])
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite step")
        return x


def _build_system(params, terms, layout):
    system = _System(layout)
    total = 0.0
    per_term = {}
    for term in terms:
        r, entries = term.evaluate(params, True)
        s2 = np.sum(r * r, axis=1)
        rho, drho = robust_rho(s2, term.huber)
        c = float(term.weight * np.sum(rho))
        per_term[term.name] = per_term.get(term.name, 0.0) + c
        total += c
        if len(r):
            system.add_term(r, entries, np.sqrt(term.weight * drho))
    system.finalize()
    return system, total, per_term


def _retract(params, layout, x):
    out = {}
    nr = layout.n_reduced
    for name in layout.names:
        g = params[name]
        delta = np.zeros((len(g), g.dim))
        free = layout.index[name] >= 0
        if name == layout.elim:
            delta[free] = x[nr:].reshape(-1, g.dim)
        else:
            o = layout.offsets[name]
            delta[free] = x[o : o + free.sum() * g.dim].reshape(-1, g.dim)
        out[name] = g.retract(delta) if free.any() else g.copy()
    return out


def _param_norm(params):
    return float(np.sqrt(sum(p.norm() ** 2 for p in params.values())))


def minimize(params, terms, options: SolverOptions | None = None) -> SolverResult:
    """Levenberg-Marquardt with Marquardt scaling and a gain-ratio damping update."""
    opt = options or SolverOptions()
    params = {k: v.copy() for k, v in params.items()}
    layout = _Layout(params)
    cost, per_term = evaluate_cost(params, terms)
    initial = cost
    trace = [cost]
    if layout.n_total == 0:
        return SolverResult(params, cost, cost, trace, 0, "no_free_parameters", 0.0, per_term)
    if cost == 0.0:
        return SolverResult(params, cost, cost, trace, 0, "zero_cost", 0.0, per_term)

    mu = opt.initial_damping
    nu = 2.0
    termination = "max_iterations"
    gnorm = np.inf
    rebuild = True
    it = 0
    while it < opt.max_iterations:
        it += 1
        if rebuild:
            system, _, _ = _build_system(params, terms, layout)
            g = system.gradient()
            gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
            diag = np.clip(system.diagonal(), opt.min_diagonal, opt.max_diagonal)
            rebuild = False
        if gnorm <= opt.gradient_tolerance:
            termination = "gradient_tolerance"
            break
        try:
            x = system.solve(mu * diag, opt.dense_limit)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            mu *= nu
            nu *= 2.0
            if mu > opt.max_damping:
                termination = "singular"
                break
            continue
        step_norm = float(np.linalg.norm(x))
        if step_norm <= opt.parameter_tolerance * (_param_norm(params) + opt.parameter_tolerance):
            termination = "parameter_tolerance"
            break
        predicted = -(2.0 * x @ g + x @ system.hess_vec(x))
        candidate = _retract(params, layout, x)
        new_cost, new_terms = evaluate_cost(candidate, terms)
        actual = cost - new_cost
        rho = actual / predicted if predicted > 0 else -1.0
        if np.isfinite(new_cost) and actual > 0 and rho > 1e-3:
            params = candidate
            per_term = new_terms
            old = cost
            cost = new_cost
            trace.append(cost)
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            rebuild = True
            if cost == 0.0:
                termination = "zero_cost"
                break
            if actual <= opt.function_tolerance * old:
                termination = "function_tolerance"
                break
        else:
            mu *= nu
            nu *= 2.0
            if mu > opt.max_damping:
                termination = "damping_limit"
                break
    log.debug("LM finished: %s after %d iterations, cost %.6g -> %.6g", termination, it, initial, cost)
    return SolverResult(params, initial, cost, trace, it, termination, gnorm, per_term)
