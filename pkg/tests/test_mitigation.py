import numpy as np
import pytest
from hypothesis import given, strategies as st

from degicp.cloud import build_index
from degicp.degeneracy import DetectionConfig, detect, empty_report, report_from_rows
from degicp.linalg import RigidTransform, svd_solve, sym_eig
from degicp.linearize import NormalEquations, build_normal_equations, build_rows
from degicp.matching import CorrespondenceSet, match, trimmed_filter
from degicp.mitigation import (ACTIVE_METHODS, LmConfig, MethodKind, MitigationConfig, cauchy_weight,
                               ineq_bounds, mad_scale, nl_cost, nl_gradient, nl_hessian, solve,
                               solve_cauchy, solve_eq_con, solve_ineq_con, solve_lreg, solve_nlreg,
                               solve_p2plane, solve_prior_only, solve_remap, solve_tsvd, with_parameter)
from degicp.simulation import CylinderScene, make_cylinder_scenario

from conftest import cube_cloud, degenerate_system, diag_system, random_system
from oracles import kkt_equality_solve


def well_conditioned(rng, n=80):
    corr, rows, ne = random_system(rng, n)
    return corr, rows, ne


# ----------------------------------------------------------- config -----

def test_method_names_are_exact():
    assert [m.value for m in MethodKind] == ["P2Plane", "EqCon", "IneqCon", "SolutionRemap", "Tsvd",
                                             "LReg", "NlReg", "PriorOnly", "Cauchy"]
    assert MethodKind.parse("Tsvd") is MethodKind.Tsvd
    with pytest.raises(ValueError):
        MethodKind.parse("tsvd")


def test_default_parameters():
    cfg = MitigationConfig()
    assert (cfg.epsilon, cfg.lambda_lreg, cfg.lambda_nlreg, cfg.kappa, cfg.tsvd_floor) == \
        (0.0014, 440.0, 675.0, 1.0, 1e-4)
    assert cfg.lm.parameter_tol == 1e-3 and cfg.lm.function_tol == 1e-3
    assert MitigationConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("name", ["epsilon", "lambda_lreg", "lambda_nlreg", "kappa", "tsvd_floor"])
def test_nonpositive_parameters_rejected(name):
    with pytest.raises(ValueError):
        MitigationConfig(**{name: 0.0})


def test_with_parameter_replaces_one_field():
    cfg = with_parameter(MitigationConfig(), "lambda_lreg", 10.0)
    assert cfg.lambda_lreg == 10.0 and cfg.epsilon == 0.0014


def test_lm_config_validation():
    with pytest.raises(ValueError):
        LmConfig(max_inner_iterations=0)
    with pytest.raises(ValueError):
        LmConfig(initial_damping=-1.0)


# --------------------------------------------------------- P2Plane -----

def test_p2plane_zero_rhs():
    _, _, ne = random_system(np.random.default_rng(0))
    assert np.all(solve_p2plane(NormalEquations(ne.A, np.zeros(6), 1)).x == 0.0)


def test_p2plane_minimum_norm_on_rank_deficient(rng):
    ne, V = degenerate_system(rng, push=0.0)
    x = solve_p2plane(ne).x
    np.testing.assert_allclose(V.T @ x, 0.0, atol=1e-10)
    np.testing.assert_allclose(ne.A @ x, ne.b, atol=1e-9 * np.linalg.norm(ne.b))


def test_p2plane_recovers_cube_translation_in_one_step():
    ref = cube_cloud(n_per_face=900)
    t = np.array([0.05, 0.03, -0.02])
    src = ref.transformed(RigidTransform(np.eye(3), -t))
    corr = match(src, RigidTransform.identity(), build_index(ref), ref)
    x = solve_p2plane(build_normal_equations(build_rows(trimmed_filter(corr, 0.9)))).x
    assert np.linalg.norm(x[3:] - t) <= 0.1 * np.linalg.norm(t)
    assert np.linalg.norm(x[:3]) <= 1e-2


# ----------------------------------------------------------- EqCon -----

def test_eqcon_without_constraints_is_p2plane_bitwise(rng):
    _, _, ne = well_conditioned(rng)
    assert np.array_equal(solve_eq_con(ne, empty_report()).x, solve_p2plane(ne).x)


@given(st.integers(0, 10_000))
def test_eqcon_satisfies_constraints(seed):
    rng = np.random.default_rng(seed)
    ne, V = degenerate_system(rng, int(rng.integers(0, 3)), int(rng.integers(0, 3)))
    rep = detect(ne)
    x = solve_eq_con(ne, rep).x
    assert np.abs(rep.constraint_rows @ x).max(initial=0.0) <= 1e-9


def test_eqcon_matches_dense_kkt_and_push_along_v_gives_large_multiplier(rng):
    _, _, ne = well_conditioned(rng)
    v = np.zeros(6)
    v[2] = 1.0
    rep = report_from_rows([v])
    out = solve_eq_con(ne, rep)
    x_ref, mu_ref = kkt_equality_solve(2 * ne.A, -2 * ne.b, v[None], np.zeros(1))
    np.testing.assert_allclose(out.x, x_ref, atol=1e-12)
    np.testing.assert_allclose(out.lagrange_multipliers, mu_ref, rtol=1e-9)
    # a pure push along an eigenvector of A is cancelled entirely by the multiplier
    u = sym_eig(ne.A).eigenvectors[:, -1]
    rep_u = report_from_rows([u], ["rotational"])
    pushed = NormalEquations(ne.A, ne.A @ u * 10.0, ne.n_pairs)
    out_push = solve_eq_con(pushed, rep_u)
    assert np.linalg.norm(out_push.x) <= 1e-9 * 10
    assert abs(out_push.lagrange_multipliers[0]) > 10 * abs(out.lagrange_multipliers[0])


# --------------------------------------------------------- IneqCon -----

def test_ineqcon_without_constraints_is_p2plane(rng):
    _, _, ne = well_conditioned(rng)
    np.testing.assert_allclose(solve_ineq_con(ne, empty_report()).x, solve_p2plane(ne).x, atol=1e-8)


def test_ineqcon_bounds_split_by_kind():
    rep = report_from_rows([[1, 0, 0, 0, 0, 0], [0, 0, 0, 0, 1, 0]])
    np.testing.assert_array_equal(ineq_bounds(rep, 0.0014), [0.0007, 0.0014])


def test_ineqcon_severe_push_hits_bound(rng):
    ne, V = degenerate_system(rng, 1, 0, push=50.0)
    rep = detect(ne)
    out = solve_ineq_con(ne, rep, 0.0014)
    v = rep.constraint_rows[0]
    assert abs(v @ out.x) == pytest.approx(0.0007, abs=1e-12)
    assert abs(out.lagrange_multipliers[0]) > 0


def test_ineqcon_huge_epsilon_is_p2plane(rng):
    _, _, ne = well_conditioned(rng)
    rep = report_from_rows([[0, 0, 1, 0, 0, 0]])
    np.testing.assert_allclose(solve_ineq_con(ne, rep, 1e9).x, solve_p2plane(ne).x, atol=1e-6)


def test_ineqcon_rejects_nonpositive_epsilon(rng):
    _, _, ne = well_conditioned(rng)
    with pytest.raises(ValueError):
        solve_ineq_con(ne, empty_report(), 0.0)


@given(st.integers(0, 10_000))
def test_constraint_ordering_eq_ineq_bound(seed):
    rng = np.random.default_rng(seed)
    ne, _ = degenerate_system(rng, 1, 1, push=float(rng.uniform(0, 20)))
    rep = detect(ne)
    bound = ineq_bounds(rep, 0.0014)
    eq = np.abs(rep.constraint_rows @ solve_eq_con(ne, rep).x)
    ineq = np.abs(rep.constraint_rows @ solve_ineq_con(ne, rep).x)
    assert np.all(eq <= ineq + 1e-12) and np.all(ineq <= bound + 1e-8)


# ----------------------------------------------------------- Remap -----

def test_remap_without_constraints_is_exact(rng):
    _, _, ne = well_conditioned(rng)
    assert np.array_equal(solve_remap(ne, empty_report()).x, svd_solve(ne.A, ne.b))


def test_remap_single_row_is_rank_one_projection():
    rng = np.random.default_rng(31)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    A = (Q * [50, 40, 30, 20, 10, 5.0]) @ Q.T
    A = 0.5 * (A + A.T)
    b = rng.normal(size=6)
    v = Q[:, 5]
    x_p2 = svd_solve(A, b)
    x = solve_remap(NormalEquations(A, b, 6), report_from_rows([v], ["translational"])).x
    np.testing.assert_allclose(x, x_p2 - (v @ x_p2) * v, atol=1e-12)


def test_remap_all_directions_degenerate_gives_zero(rng):
    _, _, ne = well_conditioned(rng)
    assert np.allclose(solve_remap(ne, report_from_rows(np.eye(6))).x, 0.0, atol=1e-15)


# ------------------------------------------------------------ Tsvd -----

def test_tsvd_no_flags_matches_svd_solve(rng):
    _, _, ne = well_conditioned(rng)
    np.testing.assert_allclose(solve_tsvd(ne, empty_report()).x, svd_solve(ne.A, ne.b), atol=1e-8)


def test_tsvd_diagonal_example():
    ne = diag_system([4, 4, 4, 4, 4, 1e-9], np.ones(6))
    x = solve_tsvd(ne, report_from_rows([[0, 0, 0, 0, 0, 1]]), 1e-4).x
    np.testing.assert_allclose(x, [0.25] * 5 + [1e-4], atol=1e-15)


def test_tsvd_leakage_when_rhs_orthogonal(rng):
    ne, V = degenerate_system(rng, 1, 1, push=0.0)
    rep = detect(ne)
    x = solve_tsvd(ne, rep).x
    assert np.abs(rep.constraint_rows @ x).max() <= 1e-4 * np.linalg.norm(ne.b)


def test_tsvd_rejects_nonpositive_floor(rng):
    _, _, ne = well_conditioned(rng)
    with pytest.raises(ValueError):
        solve_tsvd(ne, empty_report(), 0.0)


@given(st.integers(0, 10_000))
def test_tsvd_and_remap_agree_on_exact_eigenvectors(seed):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    s = 10 ** rng.uniform(0, 3, 6)
    A = (Q * s) @ Q.T
    A = 0.5 * (A + A.T)
    b = rng.normal(size=6)
    eig = sym_eig(A)
    k = int(rng.integers(1, 4))
    rep = report_from_rows(eig.eigenvectors[:, -k:].T)
    ne = NormalEquations(A, b, 6)
    d = np.linalg.norm(solve_tsvd(ne, rep).x - solve_remap(ne, rep).x)
    assert d <= 1e-4 * np.linalg.norm(b) + 1e-8


# ------------------------------------------------------------ LReg -----

def test_lreg_without_constraints_is_p2plane(rng):
    _, _, ne = well_conditioned(rng)
    np.testing.assert_allclose(solve_lreg(ne, empty_report()).x, solve_p2plane(ne).x, atol=1e-9)


def test_lreg_filter_factors_on_diagonal_system():
    # With A = diag(s^2) the unregularized component is b/s^2; regularization multiplies it by
    # s^2 / (s^2 + lambda).
    sig2 = np.array([1e4, 900.0, 440.0, 50.0, 3.0, 0.1])
    b = np.array([1.0, -2.0, 0.5, 3.0, -1.0, 0.2])
    lam = 440.0
    x = solve_lreg(diag_system(sig2, b), report_from_rows(np.eye(6)), lam).x
    z = sig2 / (sig2 + lam)
    np.testing.assert_allclose(x, z * b / sig2, rtol=1e-10, atol=0)


def test_lreg_huge_lambda_suppresses_constraint(rng):
    ne, _ = degenerate_system(rng, 1, 0, push=5.0)
    rep = detect(ne)
    x = solve_lreg(ne, rep, 1e12).x
    x_p2 = svd_solve(ne.A, ne.b)
    assert abs(rep.constraint_rows[0] @ x) <= 1e-6 * np.linalg.norm(x_p2)
    x_eq = solve_eq_con(ne, rep).x
    assert np.linalg.norm(x - x_eq) <= 1e-5 * np.linalg.norm(x_eq)


@given(st.integers(0, 10_000), st.sampled_from([(1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 2)]))
def test_lreg_huge_lambda_keeps_well_constrained_part(seed, dims):
    # adding 1e12 * L^T L to A in floating point would round A's own entries away
    ne, V = degenerate_system(np.random.default_rng(seed), *dims)
    rep = report_from_rows(V.T, ["rotational"] * dims[0] + ["translational"] * dims[1])
    x_eq = solve_eq_con(ne, rep).x
    assert np.linalg.norm(solve_lreg(ne, rep, 1e12).x - x_eq) <= 1e-7 * np.linalg.norm(x_eq)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e6))
def test_lreg_matches_direct_regularized_solve(seed, lam):
    rng = np.random.default_rng(seed)
    _, _, ne = random_system(rng)
    C = np.linalg.qr(rng.normal(size=(6, 2)))[0].T
    rep = report_from_rows(C)
    direct = np.linalg.solve(ne.A + lam * C.T @ C, ne.b)
    np.testing.assert_allclose(solve_lreg(ne, rep, lam).x, direct, rtol=1e-8, atol=1e-12)


def test_lreg_constraint_motion_decreases_with_lambda():
    rng = np.random.default_rng(32)
    _, _, ne = well_conditioned(rng)
    v = np.array([0, 0, 1.0, 0, 0, 0])
    rep = report_from_rows([v])
    motions = [abs(v @ solve_lreg(ne, rep, lam).x) for lam in np.logspace(0, 6, 10)]
    assert np.all(np.diff(motions) <= 0)


def test_lreg_rejects_nonpositive_lambda(rng):
    _, _, ne = well_conditioned(rng)
    with pytest.raises(ValueError):
        solve_lreg(ne, empty_report(), 0.0)


# ----------------------------------------------------------- NlReg -----

def exact_scene(rng, n=200, x_true=None):
    """Correspondences with zero residual at ``x_true``: q lies on the plane through exp(r) p + t."""
    from degicp.linalg import so3_exp
    p = rng.uniform(-3, 3, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    x_true = np.zeros(6) if x_true is None else np.asarray(x_true, dtype=float)
    moved = p @ so3_exp(x_true[:3]).T + x_true[3:]
    # slide q within the tangent plane so it is not simply equal to the moved point
    slide = rng.normal(size=(n, 3)) * 0.1
    slide -= np.einsum("ij,ij->i", slide, nrm)[:, None] * nrm
    return CorrespondenceSet.from_arrays(p, moved + slide, nrm)


def test_nlreg_gradient_against_finite_differences():
    rng = np.random.default_rng(33)
    corr = exact_scene(rng, x_true=[0.02, -0.01, 0.03, 0.1, 0.0, -0.05])
    L = report_from_rows([[0, 0, 1, 0, 0, 0], [0, 0, 0, 1, 0, 0]]).constraint_rows
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=6) * 0.2
        g = nl_gradient(corr, L, 675.0, x)
        fd = np.array([(nl_cost(corr, L, 675.0, x + h * e) - nl_cost(corr, L, 675.0, x - h * e)) / (2 * h)
                       for e in np.eye(6)])
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst <= 1e-5


def test_nlreg_hessian_diagonal_at_zero_residual():
    rng = np.random.default_rng(34)
    x_true = np.array([0.05, 0.02, -0.04, 0.1, -0.2, 0.05])
    corr = exact_scene(rng, x_true=x_true)
    L = report_from_rows([[0, 1, 0, 0, 0, 0]]).constraint_rows
    H = nl_hessian(corr, L, 675.0, x_true)
    h = 1e-4
    for i, e in enumerate(np.eye(6)):
        fd = (nl_cost(corr, L, 675.0, x_true + h * e) - 2 * nl_cost(corr, L, 675.0, x_true)
              + nl_cost(corr, L, 675.0, x_true - h * e)) / h ** 2
        assert abs(H[i, i] - fd) <= 1e-3 * abs(fd)


def test_nlreg_without_regularization_matches_p2plane_fixed_point():
    rng = np.random.default_rng(35)
    corr = exact_scene(rng, n=300, x_true=[1e-3, -2e-3, 1e-3, 5e-3, 2e-3, -4e-3])
    rows = build_rows(corr)
    x_p2 = solve_p2plane(build_normal_equations(rows)).x
    tight = LmConfig(parameter_tol=1e-12, function_tol=1e-15, gradient_tol=1e-14, max_inner_iterations=100)
    x_nl = solve_nlreg(corr, empty_report(), 0.0, tight).x
    # linearization differs from the exact rotation only at second order in |x|
    np.testing.assert_allclose(x_nl, x_p2, atol=1e-4)


def test_nlreg_suppresses_cylinder_axis_rotation():
    sc = make_cylinder_scenario(CylinderScene(), seed=0)
    corr = trimmed_filter(match(sc.source, sc.prior, build_index(sc.reference), sc.reference), 0.9)
    ne = build_normal_equations(build_rows(corr))
    rep = detect(ne, DetectionConfig(1e-2))
    v = rep.constraint_rows[0]
    assert abs(v[2]) > 0.99
    assert abs(v @ solve_nlreg(corr, rep, 675.0).x) <= 0.1 * abs(v @ solve_p2plane(ne).x)


def test_nlreg_zero_iterations_when_already_optimal():
    corr = exact_scene(np.random.default_rng(36))
    out = solve_nlreg(corr, empty_report(), 675.0, LmConfig(gradient_tol=1e-6))
    assert out.inner_iterations == 0 and np.all(out.x == 0)


def test_nlreg_rejects_empty():
    empty = CorrespondenceSet.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        solve_nlreg(empty, empty_report())


# ---------------------------------------------------------- Cauchy -----

def test_cauchy_weight_examples():
    assert cauchy_weight(0.0) == 1.0
    s, kappa = 0.37, 2.5
    assert cauchy_weight((s * kappa) / s, kappa) == 0.5
    assert cauchy_weight(1.0, 1.0) == 0.5


def test_mad_scale_matches_definition():
    e = np.array([1.0, 2.0, 3.0, 4.0, 100.0])
    assert mad_scale(e) == pytest.approx(1.4826 * 1.0)
    assert mad_scale(np.zeros(4)) == 1e-9


def test_cauchy_uniform_residuals_give_unweighted_solution():
    rng = np.random.default_rng(37)
    p = rng.normal(size=(60, 3)) * 2
    nrm = rng.normal(size=(60, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    corr = CorrespondenceSet.from_arrays(p, p + 0.01 * nrm, nrm)       # every residual is 0.01
    rows = build_rows(corr)
    out = solve_cauchy(rows, max_irls=1)
    np.testing.assert_allclose(out.x, solve_p2plane(build_normal_equations(rows)).x, atol=1e-9)


def test_cauchy_huge_kappa_is_untrimmed_p2plane(rng):
    corr, rows, ne = random_system(rng, 200)
    np.testing.assert_allclose(solve_cauchy(rows, kappa=1e9).x, solve_p2plane(ne).x, atol=1e-6)


def test_cauchy_down_weights_gross_outliers():
    rng = np.random.default_rng(38)
    corr = exact_scene(rng, n=400, x_true=[0.01, -0.01, 0.02, 0.05, -0.03, 0.02])
    q = corr.ref_pts.copy()
    bad = rng.choice(400, 80, replace=False)
    q[bad] += corr.ref_normals[bad] * rng.uniform(1.0, 3.0, (80, 1)) * rng.choice([-1, 1], (80, 1))
    rows = build_rows(CorrespondenceSet.from_arrays(corr.source_pts, q, corr.ref_normals))
    clean = solve_p2plane(build_normal_equations(build_rows(corr))).x
    err_c = np.linalg.norm(solve_cauchy(rows).x - clean)
    err_p = np.linalg.norm(solve_p2plane(build_normal_equations(rows)).x - clean)
    assert err_c <= 0.5 * err_p


# ------------------------------------------------------- PriorOnly -----

def test_prior_only():
    rng = np.random.default_rng(39)
    _, _, ne = well_conditioned(rng)
    out = solve_prior_only(ne, report_from_rows([[0, 0, 1, 0, 0, 0]]))
    assert out.skipped and np.all(out.x == 0)
    assert solve_prior_only(ne, report_from_rows(np.eye(6))).skipped
    same = solve_prior_only(ne, empty_report())
    assert not same.skipped and np.array_equal(same.x, solve_p2plane(ne).x)


# -------------------------------------------------- cross-method -------

@given(st.integers(0, 10_000))
def test_reduction_family_without_flags(seed):
    rng = np.random.default_rng(seed)
    corr, rows, ne = well_conditioned(rng)
    ref = solve_p2plane(ne).x
    rep = empty_report()
    for m in (MethodKind.EqCon, MethodKind.IneqCon, MethodKind.SolutionRemap, MethodKind.Tsvd,
              MethodKind.LReg, MethodKind.PriorOnly):
        x = solve(m, corr=corr, rows=rows, ne=ne, rep=rep).x
        np.testing.assert_allclose(x, ref, atol=1e-8, err_msg=m.value)


def test_dispatch_covers_every_method(rng):
    corr, rows, ne = well_conditioned(rng)
    rep = detect(ne)
    for m in MethodKind:
        out = solve(m, corr=corr, rows=rows, ne=ne, rep=rep)
        assert out.x.shape == (6,) and np.all(np.isfinite(out.x))
    assert set(ACTIVE_METHODS) == set(MethodKind) - {MethodKind.P2Plane, MethodKind.PriorOnly,
                                                     MethodKind.Cauchy}
