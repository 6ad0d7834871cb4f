"""Dual active-set (Goldfarb-Idnani) solver for box-constrained strictly convex QPs.

Solves::

    min 0.5 x^T F x + f^T x    s.t.  lower <= L x <= upper

Rows with ``lower == upper`` are handled as equality constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import sym_eig


class QpError(RuntimeError):
    pass


class Infeasible(QpError):
    pass


class MaxIterations(QpError):
    pass


@dataclass(frozen=True)
class QpProblem:
    F: np.ndarray
    f: np.ndarray
    L: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=float)
        n = F.shape[0]
        L = np.array(self.L, dtype=float).reshape(-1, n)
        lo = np.array(self.lower, dtype=float).reshape(-1)
        up = np.array(self.upper, dtype=float).reshape(-1)
        if len(lo) != len(L) or len(up) != len(L):
            raise ValueError("bounds must have one entry per constraint row")
        if np.any(lo > up):
            raise Infeasible("lower bound exceeds upper bound")
        if np.max(np.abs(F - F.T), initial=0.0) > 1e-9 * max(1.0, np.max(np.abs(F), initial=0.0)):
            raise ValueError("F must be symmetric")
        for name, val in (("F", F), ("f", np.array(self.f, dtype=float).reshape(n)),
                          ("L", L), ("lower", lo), ("upper", up)):
            object.__setattr__(self, name, val)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.F @ x + self.f @ x)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    active_set: list           # (row index, "lower" | "upper" | "equal")
    dual_values: np.ndarray    # multiplier per active constraint, same order
    iterations: int
    objective_trace: list = field(default_factory=list)

    def signed_multipliers(self, n_rows: int) -> np.ndarray:
        """Per-row multipliers ``mu`` with ``F x + f + L^T mu = 0``."""
        mu = np.zeros(n_rows)
        for (i, side), u in zip(self.active_set, self.dual_values):
            mu[i] += -u if side in ("lower", "equal") else u
        return mu


def pd_floor(F: np.ndarray) -> np.ndarray:
    """Add ``1e-10 * trace(F) * I`` when ``F`` is numerically singular."""
    w = sym_eig(F).eigenvalues
    if w[-1] < 1e-12 * max(w[0], 0.0) or w[0] <= 0.0:
        tr = float(np.trace(F))
        return F + max(1e-10 * tr, 1e-300) * np.eye(len(F))
    return F


def qp_solve(p: QpProblem, max_changes: int = 100, tol: float = 1e-12) -> QpSolution:
    """Goldfarb-Idnani dual method.

    Constraints are written as ``n_k . x >= b_k``; each box row ``i`` yields
    ``L_i x >= lower_i`` and ``-L_i x >= -upper_i``. Starting from the
    unconstrained minimum, the most violated constraint is added, stepping
    in primal and dual space and dropping constraints whose multiplier would
    turn negative. The primal objective grows monotonically.
    """
    F = pd_floor(p.F)
    n = len(F)
    Finv = np.linalg.inv(F)
    Finv = 0.5 * (Finv + Finv.T)

    normals, rhs, meta = [], [], []
    for i, row in enumerate(p.L):
        if p.lower[i] == p.upper[i]:
            normals.append(row)
            rhs.append(p.lower[i])
            meta.append((i, "equal"))
        else:
            normals.append(row)
            rhs.append(p.lower[i])
            meta.append((i, "lower"))
            normals.append(-row)
            rhs.append(-p.upper[i])
            meta.append((i, "upper"))
    N_all = np.array(normals, dtype=float).reshape(-1, n)
    b_all = np.array(rhs, dtype=float)
    is_eq = np.array([m[1] == "equal" for m in meta], dtype=bool)

    x = -Finv @ p.f
    active: list[int] = []
    u = np.zeros(0)
    trace = [p.objective(x)]
    changes = 0
    scale = 1.0 + np.max(np.abs(b_all), initial=0.0)

    def directions(k: int):
        nk = N_all[k]
        if not active:
            return Finv @ nk, np.zeros(0)
        N = N_all[active].T                         # (n, q)
        FN = Finv @ N
        M = N.T @ FN
        Nstar = np.linalg.solve(M, FN.T)            # (q, n)
        z = Finv @ nk - FN @ (Nstar @ nk)
        return z, Nstar @ nk

    # equalities first, then the most violated inequality until none remain
    pending_eq = [k for k in range(len(b_all)) if is_eq[k]]
    while True:
        if pending_eq:
            k = pending_eq.pop(0)
            s = N_all[k] @ x - b_all[k]
            if s > 0:
                # equality is added from the side it is violated on
                N_all[k], b_all[k] = -N_all[k], -b_all[k]
                s = -s
        else:
            slack = N_all @ x - b_all if len(b_all) else np.zeros(0)
            cand = [(slack[j], j) for j in range(len(b_all)) if j not in active and not is_eq[j]]
            if not cand:
                break
            s, k = min(cand)
            if s >= -tol * scale:
                break
        u_plus = np.append(u, 0.0)
        while True:
            z, r = directions(k)
            zn = float(z @ N_all[k])
            t2 = np.inf if abs(zn) <= 1e-300 or np.linalg.norm(z) <= 1e-14 * (1 + np.linalg.norm(x)) \
                else -s / zn
            t1, drop = np.inf, None
            for j, a in enumerate(active):
                if not is_eq[a] and r[j] > 1e-14:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, drop = ratio, j
            t = min(t1, t2)
            if not np.isfinite(t):
                raise Infeasible("constraint cannot be satisfied")
            changes += 1
            if changes > max_changes:
                raise MaxIterations(f"more than {max_changes} active-set changes")
            if np.isinf(t2):
                # partial step in dual space only
                u_plus[:-1] -= t * r
                u_plus[-1] += t
                del active[drop]
                u_plus = np.delete(u_plus, drop)
                continue
            x = x + t * z
            u_plus[:-1] -= t * r
            u_plus[-1] += t
            s = float(N_all[k] @ x - b_all[k])
            trace.append(p.objective(x))
            if t == t2:
                active.append(k)
                u = u_plus
                break
            del active[drop]
            u_plus = np.delete(u_plus, drop)

    if active:
        x, u = _refine(F, p.f, N_all[active], b_all[active], x, u, N_all, b_all, is_eq, active, scale)
    act = [meta[k] for k in active]
    duals = np.array([u[j] if not is_eq[k] or np.sign(N_all[k] @ p.L[meta[k][0]]) > 0 else -u[j]
                      for j, k in enumerate(active)], dtype=float)
    return QpSolution(x, act, duals, changes, trace)


def _refine(F, f, N, b, x, u, N_all, b_all, is_eq, active, scale):
    """Re-solve the equality KKT system of the final active set directly.

    The dual iterations work with ``F^-1``, which loses digits when ``F`` only
    carries the positive-definite floor along some direction. The KKT matrix
    itself stays well conditioned once the active rows pin those directions,
    so the direct solve restores feasibility to rounding level. The refined
    point is kept only if it is still primal and dual feasible.
    """
    n, q = len(F), len(N)
    K = np.zeros((n + q, n + q))
    K[:n, :n] = F
    K[:n, n:] = -N.T
    K[n:, :n] = N
    try:
        sol = np.linalg.solve(K, np.concatenate([-f, b]))
    except np.linalg.LinAlgError:
        return x, u
    x_new, u_new = sol[:n], sol[n:]
    ineq = ~is_eq[active]
    if np.any(u_new[ineq] < -1e-9 * max(1.0, np.max(np.abs(u_new)))):
        return x, u
    slack = N_all @ x_new - b_all
    others = np.ones(len(b_all), dtype=bool)
    others[active] = False
    if np.any(slack[others & ~is_eq] < -1e-9 * scale):
        return x, u
    return x_new, u_new


def kkt_residual(p: QpProblem, sol: QpSolution) -> tuple[float, float]:
    """(stationarity residual, worst complementary-slackness product)."""
    mu = sol.signed_multipliers(len(p.L))
    stat = float(np.linalg.norm(p.F @ sol.x + p.f + p.L.T @ mu))
    Lx = p.L @ sol.x
    comp = 0.0
    for (i, side), u in zip(sol.active_set, sol.dual_values):
        bound = p.upper[i] if side == "upper" else p.lower[i]
        comp = max(comp, abs(u * (Lx[i] - bound)))
    return stat, comp
