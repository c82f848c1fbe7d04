import math

import numpy as np
import pytest
from scipy import integrate as sci_integrate
from scipy.special import erf

from sdelab import calculus as calc
from sdelab.calculus import (
    CoefficientSet,
    DensityField,
    EllipticityError,
    QuadratureRule,
    ShapeError,
    apply_generator,
    build_coefficient_set,
    bump_expression,
    coefficient_set_from_drift,
    decompose_drift,
    diffusion_root,
    integrate,
    invariance_residual,
    log_derivative_beta,
)
from sdelab.expr import CallableField, evaluate, parse_expr


def identity_cs(d=2, H=None):
    A = [["1" if i == j else "0" for j in range(i, d)] for i in range(d)]
    A = [[A[i][j] for j in range(len(A[i]))] for i in range(d)]
    return build_coefficient_set(A, None, H, d=d)


def test_build_identity_drift_zero():
    cs = identity_cs()
    pts = np.random.default_rng(0).normal(size=(50, 2))
    assert np.all(cs.eval_G(pts) == 0)


def test_build_variable_diffusion_drift():
    # A = diag(1 + x1^2, 1): g = (1/2 d1(1+x1^2), 0) = (x1, 0)
    cs = build_coefficient_set([["1 + x1^2", "0"], ["1"]], None, None, d=2)
    pts = np.random.default_rng(1).normal(size=(50, 2))
    G = cs.eval_G(pts)
    assert np.allclose(G[:, 0], pts[:, 0], atol=1e-14)
    assert np.all(G[:, 1] == 0)


def test_build_unit_drift():
    cs = identity_cs(H=["1", "0"])
    pts = np.random.default_rng(2).normal(size=(20, 2))
    G = cs.eval_G(pts)
    assert np.allclose(G, np.tile([1.0, 0.0], (20, 1)))


def test_antisymmetric_part_enters_through_transpose():
    # C upper entry c12 = x1: g_i = 1/2 d_j c_ji adds (d2 c21, d1 c12)/2
    cs = build_coefficient_set([["1", "0"], ["1"]], [["x2^2"]], None, d=2)
    pts = np.random.default_rng(3).normal(size=(30, 2))
    G = cs.eval_G(pts)
    # c12 = x2^2, c21 = -x2^2; g_1 = 1/2 d1(a11) + 1/2 d2(c21)... uses C^T:
    # g_i = 1/2 sum_j d_j (a_ij + c_ji)
    # g_1 = 1/2 d2(c12^T entry) with (C^T)_{12} = c21 = -x2^2 -> g_1 = -x2
    assert np.allclose(G[:, 0], -pts[:, 1], atol=1e-14)
    assert np.allclose(G[:, 1], 0.0, atol=1e-14)


def test_symmetry_violation_rejected():
    with pytest.raises(ShapeError):
        build_coefficient_set([["1", "x1"], ["x2", "1"]], None, None, d=2)


def test_non_elliptic_rejected_with_witness():
    with pytest.raises(EllipticityError) as err:
        build_coefficient_set([["x1", "0"], ["1"]], None, None, d=2)
    assert err.value.witness is not None


def test_log_derivative_constant_density():
    cs = identity_cs()
    rho = DensityField.from_expression("1", 2)
    beta = log_derivative_beta(cs, rho)
    pts = np.random.default_rng(4).normal(size=(40, 2))
    assert np.allclose(beta(pts), 0.0)


def test_log_derivative_exponential_tilt():
    # rho = exp(2 x1), A = id: beta = e1 (the second invariant measure of the
    # unit-drift example)
    cs = identity_cs(H=["1", "0"])
    rho = DensityField.from_expression("exp(2*x1)", 2)
    beta = log_derivative_beta(cs, rho)
    pts = np.random.default_rng(5).normal(size=(40, 2))
    vals = beta(pts)
    assert np.allclose(vals[:, 0], 1.0, atol=1e-12)
    assert np.allclose(vals[:, 1], 0.0, atol=1e-12)


def test_log_derivative_gaussian():
    cs = identity_cs()
    rho = DensityField.from_expression("exp(-norm2(x))", 2)
    beta = log_derivative_beta(cs, rho)
    pts = np.random.default_rng(6).normal(size=(40, 2))
    assert np.allclose(beta(pts), -pts, atol=1e-12)


def test_decompose_unit_drift_lebesgue():
    cs = identity_cs(H=["1", "0"])
    rho = DensityField.from_expression("1", 2)
    B, report = decompose_drift(cs, rho)
    pts = np.random.default_rng(7).normal(size=(1000, 2))
    vals = B(pts)
    assert np.allclose(vals[:, 0], 1.0, atol=1e-10)
    assert np.allclose(vals[:, 1], 0.0, atol=1e-10)
    assert report.max_residual <= 1e-8 * report.scale


def test_decompose_unit_drift_tilted():
    cs = identity_cs(H=["1", "0"])
    rho = DensityField.from_expression("exp(2*x1)", 2)
    B, report = decompose_drift(cs, rho)
    pts = np.random.default_rng(8).normal(size=(1000, 2))
    assert np.max(np.abs(B(pts))) <= 1e-10
    assert report.max_residual <= 1e-8 * report.scale


def test_decompose_gradient_type_drift():
    # G = beta for rho = exp(-|x|^2): B vanishes identically
    cs = identity_cs(H=["-x1", "-x2"])
    rho = DensityField.from_expression("exp(-norm2(x))", 2)
    B, _ = decompose_drift(cs, rho)
    pts = np.random.default_rng(9).uniform(-3, 3, size=(500, 2))
    assert np.max(np.abs(B(pts))) <= 1e-9


def test_generator_brownian_motion():
    cs = identity_cs()
    f = parse_expr("norm2(x)", 2)
    lf = apply_generator(cs, None, f, mode="L")
    pts = np.random.default_rng(10).normal(size=(30, 2))
    assert np.allclose(lf(pts), 2.0)


def test_generator_ou():
    cs = identity_cs(H=["-x1", "-x2"])
    f = parse_expr("norm2(x) + 1", 2)
    lf = apply_generator(cs, None, f, mode="L")
    pts = np.random.default_rng(11).normal(size=(30, 2))
    r2 = np.einsum("ij,ij->i", pts, pts)
    assert np.allclose(lf(pts), 2.0 - 2.0 * r2, atol=1e-12)


def test_generator_adjoint_tabulated_field():
    # 1-D non-invariance certificate: L'h = -2x exp(-x^2) + 2 for the
    # Gaussian-primitive h against drift -x - 2 exp(x^2)
    cs = coefficient_set_from_drift([["1"]], ["-x1 - 2*exp(x1^2)"], d=1)
    rho = DensityField.from_expression("exp(-x1^2)", 1)
    h = CallableField(
        value=lambda p: math.sqrt(math.pi) / 2 * (1 + erf(p[:, 0])),
        grad=lambda p: np.exp(-p[:, 0] ** 2)[:, None],
        hess=lambda p: (-2 * p[:, 0] * np.exp(-p[:, 0] ** 2))[:, None, None],
    )
    lph = apply_generator(cs, rho, h, mode="L_adjoint")
    xs = np.linspace(-3, 3, 41)[:, None]
    want = -2 * xs[:, 0] * np.exp(-xs[:, 0] ** 2) + 2
    assert np.allclose(lph(xs), want, atol=1e-10)


def test_generator_mode_identities():
    # L - L0 = <B, grad f> and L + L' = 2 L0, pointwise
    cs = build_coefficient_set(
        [["1 + x2^2", "0.5"], ["2"]], [["x1"]], ["-x1", "-x2"], d=2
    )
    rho = DensityField.from_expression("exp(-norm2(x))", 2)
    f = parse_expr("x1^2 * x2 + exp(-norm2(x))", 2)
    L = apply_generator(cs, rho, f, mode="L")
    L0 = apply_generator(cs, rho, f, mode="L_zero")
    Lp = apply_generator(cs, rho, f, mode="L_adjoint")
    B, _ = decompose_drift(cs, rho, rule=QuadratureRule.box(2.0, 2, 41))
    grads = [parse_expr("2*x1*x2 - 2*x1*exp(-norm2(x))", 2), parse_expr("x1^2 - 2*x2*exp(-norm2(x))", 2)]
    pts = np.random.default_rng(12).uniform(-2, 2, size=(60, 2))
    gvals = np.stack([evaluate(g, pts) for g in grads], axis=-1)
    scale = np.maximum(1.0, np.abs(L(pts)))
    assert np.max(np.abs(L(pts) - L0(pts) - np.einsum("ni,ni->n", B(pts), gvals)) / scale) < 1e-10
    assert np.max(np.abs(L(pts) + Lp(pts) - 2 * L0(pts)) / scale) < 1e-10


def test_invariance_residual_unit_drift():
    cs = identity_cs(H=["1", "0"])
    rule = QuadratureRule.box(3.0, 2, 241)
    rho = DensityField.from_expression("1", 2)
    # bump sits where the tilted weight exp(2 x1) stays moderate, else the
    # Simpson truncation at 241 nodes/axis dominates the residual
    f = bump_expression([-1.0, 0.0], [1.9, 1.9], 2)
    rep = invariance_residual(cs, rho, f, rule)
    assert not rep.support_leak
    assert abs(rep.residual) <= 1e-8 * rep.scale

    rho2 = DensityField.from_expression("exp(2*x1)", 2)
    rep2 = invariance_residual(cs, rho2, f, rule)
    assert abs(rep2.residual) <= 1e-8 * rep2.scale


def test_invariance_residual_non_invariant_pair():
    # L = (1/2) Laplacian against exp(x1) dx: residual = 1/2 int f e^{x1} dx
    cs = identity_cs()
    rule = QuadratureRule.box(3.0, 2, 241)
    rho = DensityField.from_expression("exp(x1)", 2)
    f = bump_expression([0.0, 0.0], [2.0, 2.0], 2)
    rep = invariance_residual(cs, rho, f, rule)

    bump1d = lambda t: np.maximum(1 - (t / 2.0) ** 2, 0.0) ** 3
    ix, err1 = sci_integrate.quad(lambda t: bump1d(t) * math.exp(t), -2, 2, epsabs=1e-13)
    iy, err2 = sci_integrate.quad(bump1d, -2, 2, epsabs=1e-13)
    oracle = 0.5 * ix * iy
    assert rep.residual == pytest.approx(oracle, rel=1e-6)


def test_invariance_residual_flags_support_leak():
    cs = identity_cs()
    rule = QuadratureRule.box(2.0, 2, 81)
    rho = DensityField.from_expression("1", 2)
    rep = invariance_residual(cs, rho, parse_expr("exp(-norm2(x))", 2), rule)
    assert rep.support_leak


def test_diffusion_root_identity_and_diag():
    cs = identity_cs()
    assert np.allclose(diffusion_root(cs, [0.3, -1.2]), np.eye(2))
    cs2 = build_coefficient_set([["4", "0"], ["9"]], None, None, d=2)
    assert np.allclose(diffusion_root(cs2, [0.0, 0.0]), np.diag([2.0, 3.0]))


def test_diffusion_root_multiplies_back():
    rng = np.random.default_rng(123)
    M = rng.normal(size=(3, 3))
    A = M @ M.T + 3 * np.eye(3)
    root = calc.diffusion_root_batch(A)
    assert np.max(np.abs(root @ root - A)) <= 1e-12 * np.max(np.abs(A))


def test_diffusion_root_locally_lipschitz():
    rng = np.random.default_rng(321)
    M = rng.normal(size=(3, 3))
    A = M @ M.T + 2 * np.eye(3)
    delta = 1e-6
    P = rng.normal(size=(3, 3))
    P = (P + P.T) / 2
    P *= delta / np.max(np.abs(P))
    r0 = calc.diffusion_root_batch(A)
    r1 = calc.diffusion_root_batch(A + P)
    assert np.max(np.abs(r1 - r0)) <= 50 * delta


def test_diffusion_root_degenerate_error():
    cs = build_coefficient_set([["x1^2 + 1e-300", "0"], ["1"]], None, None, d=2, probes=np.array([[1.0, 0.0]]))
    with pytest.raises(calc.DegenerateDiffusionError):
        diffusion_root(cs, [0.0, 0.0])


def test_integrate_constant():
    rule = QuadratureRule(lo=(-1, -1), hi=(1, 1), nodes=(21, 21), scheme="simpson")
    assert integrate(lambda pts: np.ones(len(pts)), rule) == pytest.approx(4.0, abs=1e-13)


def test_integrate_gaussian():
    rule = QuadratureRule.box(6.0, 2, 241)
    f = parse_expr("exp(-norm2(x))", 2)
    assert integrate(f, rule) == pytest.approx(math.pi, abs=1e-6)


def test_integrate_ball_indicator():
    rule = QuadratureRule.box(3.0, 2, 401, scheme="midpoint")
    r = 2.0
    ind = lambda pts: (np.einsum("ij,ij->i", pts, pts) <= r * r).astype(float)
    assert integrate(ind, rule) == pytest.approx(math.pi * r * r, rel=0.02)


def test_simpson_rejects_even_nodes():
    with pytest.raises(ValueError):
        QuadratureRule(lo=(-1,), hi=(1,), nodes=(10,), scheme="simpson")


def test_simpson_exact_on_cubics():
    rule = QuadratureRule(lo=(0.0,), hi=(2.0,), nodes=(3,), scheme="simpson")
    f = parse_expr("x1^3", 1)
    assert integrate(f, rule) == pytest.approx(4.0, abs=1e-13)


def test_density_grid_mode_gradient():
    xs = np.linspace(-2, 2, 81)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    vals = np.exp(-(X**2 + Y**2))
    rho = DensityField.from_grid((xs, xs), vals)
    Xi, Yi = np.meshgrid(xs[2:-2], xs[2:-2], indexing="ij")  # interior: 4th order
    pts = np.stack([Xi.reshape(-1), Yi.reshape(-1)], axis=-1)[::37]
    lg = rho.log_grad(pts)
    assert np.max(np.abs(lg + 2 * pts)) < 5e-5


def test_density_positivity_guard():
    xs = np.linspace(-1, 1, 9)
    vals = np.ones((9, 9))
    vals[4, 4] = -0.5
    with pytest.raises(calc.PositivityError):
        DensityField.from_grid((xs, xs), vals)
