"""Degeneracy mitigation solvers.

Each solver maps the linearized point-to-plane system (plus the
localizability report) to a 6-D increment ``x = [r, t]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import qp as qpmod
from .degeneracy import LocalizabilityReport
from .linalg import pinv_reciprocals, so3_exp, so3_right_jacobian, svd_solve, sym_eig
from .linearize import NormalEquations, ResidualRows, build_normal_equations
from .matching import CorrespondenceSet


class MethodKind(str, enum.Enum):
    P2Plane = "P2Plane"
    EqCon = "EqCon"
    IneqCon = "IneqCon"
    SolutionRemap = "SolutionRemap"
    Tsvd = "Tsvd"
    LReg = "LReg"
    NlReg = "NlReg"
    PriorOnly = "PriorOnly"
    Cauchy = "Cauchy"

    @classmethod
    def parse(cls, name: str) -> "MethodKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown method {name!r}; expected one of "
                             f"{', '.join(m.value for m in cls)}") from None


ACTIVE_METHODS = (MethodKind.EqCon, MethodKind.IneqCon, MethodKind.SolutionRemap,
                  MethodKind.Tsvd, MethodKind.LReg, MethodKind.NlReg)


@dataclass(frozen=True)
class LmConfig:
    parameter_tol: float = 1e-3
    function_tol: float = 1e-3
    gradient_tol: float = 1e-6
    initial_damping: float | None = None   # None: 1e-4 * trace(H) / 6
    damping_up: float = 10.0
    damping_down: float = 3.0
    damping_max: float = 1e16
    trust_region_radius: float = 0.5
    max_inner_iterations: int = 50

    def __post_init__(self):
        for name in ("parameter_tol", "function_tol", "gradient_tol", "damping_up",
                     "damping_down", "damping_max", "trust_region_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.initial_damping is not None and not self.initial_damping > 0:
            raise ValueError("initial_damping must be positive")
        if self.max_inner_iterations < 1:
            raise ValueError("max_inner_iterations must be at least 1")


@dataclass(frozen=True)
class MitigationConfig:
    epsilon: float = 0.0014
    lambda_lreg: float = 440.0
    lambda_nlreg: float = 675.0
    kappa: float = 1.0
    tsvd_floor: float = 1e-4
    max_irls: int = 10
    lm: LmConfig = field(default_factory=LmConfig)

    def __post_init__(self):
        for name in ("epsilon", "lambda_lreg", "lambda_nlreg", "kappa", "tsvd_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_irls < 1:
            raise ValueError("max_irls must be at least 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "lm"}
        d["lm"] = {f.name: getattr(self.lm, f.name) for f in fields(self.lm)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MitigationConfig":
        d = dict(d)
        lm = LmConfig(**d.pop("lm", {}))
        return cls(lm=lm, **d)


@dataclass(frozen=True)
class SolveOutcome:
    x: np.ndarray
    lagrange_multipliers: np.ndarray | None = None
    skipped: bool = False
    inner_iterations: int = 0
    no_progress: bool = False


# ------------------------------------------------------------ helpers -----

def degenerate_eigvec_mask(V: np.ndarray, constraint_rows: np.ndarray, min_cos: float = 0.9) -> np.ndarray:
    """Mark columns of ``V`` lying along the flagged degenerate directions.

    A column counts as degenerate when the norm of its projection onto the
    span of the constraint rows exceeds ``min_cos``. For a single row this is
    ``|cos(angle)| > min_cos``.
    """
    C = np.asarray(constraint_rows, dtype=float).reshape(-1, 6)
    if len(C) == 0:
        return np.zeros(V.shape[1], dtype=bool)
    # rows are orthonormal within each block and the blocks do not overlap,
    # but orthonormalize anyway so hand-built reports behave the same
    Q, _ = np.linalg.qr(C.T)
    proj = np.linalg.norm(Q.T @ V, axis=0)
    return proj > min_cos


def _rotational_rows(rep: LocalizabilityReport) -> np.ndarray:
    kinds = rep.row_kinds
    return np.array([k == "rotational" for k in kinds], dtype=bool)


# ------------------------------------------------------------ solvers -----

def solve_p2plane(ne: NormalEquations, rank_tol: float = 1e-10) -> SolveOutcome:
    return SolveOutcome(svd_solve(ne.A, ne.b, rank_tol))


def solve_eq_con(ne: NormalEquations, rep: LocalizabilityReport, d=None) -> SolveOutcome:
    """Equality constraints ``C x = d`` via the (6 + c) KKT system.

    ``[[2A, C^T], [C, 0]] [x; lambda] = [2b; d]``, solved with the SVD.
    """
    C = rep.constraint_rows
    c = len(C)
    if c == 0:
        return solve_p2plane(ne)
    if c > 6:
        raise ValueError("at most six constraint rows")
    d = np.zeros(c) if d is None else np.asarray(d, dtype=float).reshape(c)
    K = np.zeros((6 + c, 6 + c))
    K[:6, :6] = 2.0 * ne.A
    K[:6, 6:] = C.T
    K[6:, :6] = C
    rhs = np.concatenate([2.0 * ne.b, d])
    sol = svd_solve(K, rhs)
    return SolveOutcome(sol[:6], lagrange_multipliers=sol[6:])


def ineq_bounds(rep: LocalizabilityReport, epsilon: float) -> np.ndarray:
    """Half-width per constraint row: ``epsilon/2`` rotational, ``epsilon`` translational."""
    return np.where(_rotational_rows(rep), 0.5 * epsilon, epsilon)


def solve_ineq_con(ne: NormalEquations, rep: LocalizabilityReport, epsilon: float = 0.0014) -> SolveOutcome:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if rep.n_constraints == 0:
        return solve_p2plane(ne)
    bound = ineq_bounds(rep, epsilon)
    prob = qpmod.QpProblem(2.0 * ne.A, -2.0 * ne.b, rep.constraint_rows, -bound, bound)
    sol = qpmod.qp_solve(prob)
    return SolveOutcome(sol.x, lagrange_multipliers=sol.signed_multipliers(rep.n_constraints),
                        inner_iterations=sol.iterations)


def solve_remap(ne: NormalEquations, rep: LocalizabilityReport) -> SolveOutcome:
    """Project the unconstrained solution onto the well-constrained eigenvectors of ``A``."""
    x = svd_solve(ne.A, ne.b)
    if rep.n_constraints == 0:
        return SolveOutcome(x)
    V = sym_eig(ne.A).eigenvectors
    keep = ~degenerate_eigvec_mask(V, rep.constraint_rows)
    Vk = V[:, keep]
    return SolveOutcome(Vk @ (Vk.T @ x))


def solve_tsvd(ne: NormalEquations, rep: LocalizabilityReport, floor: float = 1e-4,
               rank_tol: float = 1e-10) -> SolveOutcome:
    """Truncated pseudo-inverse: degenerate eigen-directions get ``floor`` instead of ``1/sigma``."""
    if not floor > 0:
        raise ValueError("floor must be positive")
    eig = sym_eig(ne.A)
    V, s = eig.eigenvectors, np.clip(eig.eigenvalues, 0.0, None)
    inv = pinv_reciprocals(s, rank_tol)
    inv[degenerate_eigvec_mask(V, rep.constraint_rows)] = floor
    return SolveOutcome(V @ (inv * (V.T @ ne.b)))


def solve_lreg(ne: NormalEquations, rep: LocalizabilityReport, lam: float = 440.0) -> SolveOutcome:
    """Tikhonov-regularized normal equations ``(A + lam L^T L) x = b``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    L = rep.constraint_rows
    if len(L) == 0:
        return solve_p2plane(ne)
    # Forming A + lam L^T L directly rounds A away once lam dwarfs it. Work in
    # the basis [span(L^T), complement] and eliminate the stiff block instead,
    # so the complement block is solved at A's own scale.
    c = len(L)
    Q, R = np.linalg.qr(L.T, mode="complete")
    R = R[:c]
    At = Q.T @ ne.A @ Q
    bt = Q.T @ ne.b
    S = At[:c, :c] + lam * (R @ R.T)
    if c == 6:
        return SolveOutcome(Q @ svd_solve(S, bt))
    A12, A21, A22 = At[:c, c:], At[c:, :c], At[c:, c:]
    Sinv_A12 = np.linalg.solve(S, A12)
    Sinv_b1 = np.linalg.solve(S, bt[:c])
    y2 = svd_solve(A22 - A21 @ Sinv_A12, bt[c:] - A21 @ Sinv_b1)
    y1 = Sinv_b1 - Sinv_A12 @ y2
    return SolveOutcome(Q @ np.concatenate([y1, y2]))


# ---------------------------------------------------- nonlinear (LM) -----

def nl_residuals(corr: CorrespondenceSet, x) -> np.ndarray:
    """``e_i = (exp(r) p_i + t - q_i) . n_i``."""
    x = np.asarray(x, dtype=float)
    R = so3_exp(x[:3])
    moved = corr.source_pts @ R.T + x[3:]
    return np.einsum("ij,ij->i", moved - corr.ref_pts, corr.ref_normals)


def nl_jacobian(corr: CorrespondenceSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    R = so3_exp(x[:3])
    Jr = so3_right_jacobian(x[:3])
    # d(exp(r) p)/dr = -R hat(p) Jr(r), so de/dr = (p x R^T n)^T Jr(r)
    nR = corr.ref_normals @ R                   # rows: (R^T n_i)^T
    drot = np.cross(corr.source_pts, nR) @ Jr    # (p x R^T n)^T Jr
    return np.hstack([drot, corr.ref_normals])


def nl_cost(corr: CorrespondenceSet, L: np.ndarray, lam: float, x) -> float:
    e = nl_residuals(corr, x)
    Lx = L @ np.asarray(x, dtype=float)
    return float(e @ e + lam * (Lx @ Lx))


def nl_gradient(corr: CorrespondenceSet, L: np.ndarray, lam: float, x) -> np.ndarray:
    e = nl_residuals(corr, x)
    J = nl_jacobian(corr, x)
    return 2.0 * J.T @ e + 2.0 * lam * (L.T @ (L @ np.asarray(x, dtype=float)))


def nl_hessian(corr: CorrespondenceSet, L: np.ndarray, lam: float, x) -> np.ndarray:
    J = nl_jacobian(corr, x)
    return 2.0 * J.T @ J + 2.0 * lam * (L.T @ L)


def solve_nlreg(corr: CorrespondenceSet, rep: LocalizabilityReport, lambda_d: float = 675.0,
                lm: LmConfig = LmConfig(), x0=None) -> SolveOutcome:
    """Levenberg-Marquardt on the exact point-to-plane cost plus ``lambda_d |L x|^2``."""
    if len(corr) == 0:
        raise ValueError("no correspondences")
    if lambda_d < 0:
        raise ValueError("lambda_d must be non-negative")
    L = rep.constraint_rows.reshape(-1, 6)
    x = np.zeros(6) if x0 is None else np.asarray(x0, dtype=float).copy()
    cost = nl_cost(corr, L, lambda_d, x)
    damping = lm.initial_damping
    it = 0
    for it in range(1, lm.max_inner_iterations + 1):
        g = nl_gradient(corr, L, lambda_d, x)
        if np.max(np.abs(g)) <= lm.gradient_tol:
            return SolveOutcome(x, inner_iterations=it - 1)
        H = nl_hessian(corr, L, lambda_d, x)
        if damping is None:
            damping = max(1e-4 * np.trace(H) / 6.0, 1e-12)
        while True:
            step = -np.linalg.solve(H + damping * np.eye(6), g)
            norm = np.linalg.norm(step)
            if norm > lm.trust_region_radius:
                step *= lm.trust_region_radius / norm
            new_cost = nl_cost(corr, L, lambda_d, x + step)
            if new_cost < cost:
                break
            damping *= lm.damping_up
            if damping > lm.damping_max:
                return SolveOutcome(x, inner_iterations=it, no_progress=True)
        x = x + step
        damping = max(damping / lm.damping_down, 1e-300)
        decrease = cost - new_cost
        prev_cost, cost = cost, new_cost
        if np.linalg.norm(step) <= lm.parameter_tol * (np.linalg.norm(x) + lm.parameter_tol):
            break
        if decrease <= lm.function_tol * prev_cost:
            break
    return SolveOutcome(x, inner_iterations=it)


# ------------------------------------------------------------ passive -----

MAD_TO_SIGMA = 1.4826


def cauchy_weight(e, kappa: float = 1.0):
    """``w(e) = 1 / (1 + (e / kappa)^2)``."""
    e = np.asarray(e, dtype=float)
    return 1.0 / (1.0 + (e / kappa) ** 2)


def mad_scale(e, floor: float = 1e-9) -> float:
    e = np.asarray(e, dtype=float)
    s = MAD_TO_SIGMA * float(np.median(np.abs(e - np.median(e))))
    return max(s, floor)


def solve_cauchy(rows: ResidualRows, kappa: float = 1.0, max_irls: int = 10,
                 step_tol: float = 1e-8) -> SolveOutcome:
    """IRLS with Cauchy weights on MAD-normalized residuals."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if len(rows) == 0:
        raise ValueError("no residual rows")
    x = np.zeros(6)
    it = 0
    for it in range(1, max_irls + 1):
        e = rows.rows @ x - rows.residuals
        w = cauchy_weight(e / mad_scale(e), kappa)
        ne = build_normal_equations(rows, w)
        x_new = svd_solve(ne.A, ne.b)
        dx = np.linalg.norm(x_new - x)
        x = x_new
        if dx < step_tol:
            break
    return SolveOutcome(x, inner_iterations=it)


def solve_prior_only(ne: NormalEquations, rep: LocalizabilityReport) -> SolveOutcome:
    if rep.any_degenerate:
        return SolveOutcome(np.zeros(6), skipped=True)
    return solve_p2plane(ne)


def solve(method: MethodKind, *, corr: CorrespondenceSet, rows: ResidualRows, ne: NormalEquations,
          rep: LocalizabilityReport, cfg: MitigationConfig = MitigationConfig()) -> SolveOutcome:
    method = MethodKind(method)
    if method is MethodKind.P2Plane:
        return solve_p2plane(ne)
    if method is MethodKind.EqCon:
        return solve_eq_con(ne, rep)
    if method is MethodKind.IneqCon:
        return solve_ineq_con(ne, rep, cfg.epsilon)
    if method is MethodKind.SolutionRemap:
        return solve_remap(ne, rep)
    if method is MethodKind.Tsvd:
        return solve_tsvd(ne, rep, cfg.tsvd_floor)
    if method is MethodKind.LReg:
        return solve_lreg(ne, rep, cfg.lambda_lreg)
    if method is MethodKind.NlReg:
        return solve_nlreg(corr, rep, cfg.lambda_nlreg, cfg.lm)
    if method is MethodKind.PriorOnly:
        return solve_prior_only(ne, rep)
    return solve_cauchy(rows, cfg.kappa, cfg.max_irls)


def with_parameter(cfg: MitigationConfig, name: str, value: float) -> MitigationConfig:
    return replace(cfg, **{name: value})
