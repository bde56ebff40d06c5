import numpy as np
import pytest

from msto.homogenize import base_element_stiffness, homogenize, plane_stress_tensor, simp_modulus
from msto.macro_fe import (MacroProblem, MacroSolveError, compliance_sensitivities, displacement_objective,
                           displacement_sensitivities, edge_traction_loads, element_stiffness, macro_edof,
                           node_index, simp_interpolate_macro, solve_macro)


def cantilever(nx=3, ny=2, load=(0.0, -1.0)):
    fixed = [2 * node_index(nx, r, 0) + d for r in range(ny + 1) for d in (0, 1)]
    f = np.zeros(2 * (nx + 1) * (ny + 1))
    n = node_index(nx, 0, nx)
    f[2 * n:2 * n + 2] = load
    return MacroProblem(nx, ny, fixed_dofs=fixed, force=f)


def test_element_stiffness_matches_micro_element():
    np.testing.assert_allclose(element_stiffness(plane_stress_tensor()), base_element_stiffness(), atol=1e-15)


def test_edof_orientation():
    e = macro_edof(2, 1)
    assert list(e[1, 0::2] // 2) == [1, 2, 5, 4]


def test_uniform_tension_patch_test():
    # x-traction on the right edge, rollers on left and bottom: uniform stress sigma_xx = t
    nx, ny, t = 3, 2, 0.7
    fixed = [2 * node_index(nx, r, 0) for r in range(ny + 1)] + [1]
    f = edge_traction_loads(nx, ny, "right", (t, 0.0))
    prob = MacroProblem(nx, ny, fixed_dofs=fixed, force=f)
    C = plane_stress_tensor(2.0, 0.25)
    s = solve_macro(prob, np.repeat(C[None], nx * ny, axis=0))
    exx = t / 2.0
    eyy = -0.25 * t / 2.0
    for r in range(ny + 1):
        for c in range(nx + 1):
            n = node_index(nx, r, c)
            assert s.u[2 * n] == pytest.approx(exx * c, abs=1e-12)
            assert s.u[2 * n + 1] == pytest.approx(eyy * r, abs=1e-12)


def test_compliance_scales_quadratically_with_load():
    prob = cantilever()
    tensors = np.repeat(plane_stress_tensor()[None], 6, axis=0)
    c1 = solve_macro(prob, tensors).compliance
    c2 = solve_macro(prob.with_force(2 * prob.force), tensors).compliance
    assert c2 == pytest.approx(4 * c1, rel=1e-12)


def test_singular_system_raises():
    prob = MacroProblem(2, 1, fixed_dofs=[0], force=np.ones(12))
    with pytest.raises(MacroSolveError):
        solve_macro(prob, np.repeat(plane_stress_tensor()[None], 2, axis=0))


def _nested(rho_M, micros, prob):
    EH, dEH = zip(*(homogenize(m) for m in micros))
    s = solve_macro(prob, simp_interpolate_macro(rho_M, np.array(EH)))
    return s, np.array(EH), list(dEH)


def test_compliance_sensitivity_fd():
    rng = np.random.default_rng(0)
    prob = cantilever(2, 2)
    rho_M = rng.uniform(0.4, 0.9, 4)
    micros = [rng.uniform(0.2, 1.0, (8, 8)) for _ in range(4)]
    s, EH, dEH = _nested(rho_M, micros, prob)
    dM, dm = compliance_sensitivities(s, rho_M, EH, dEH)
    h = 1e-6
    for k in range(4):
        up, dn = rho_M.copy(), rho_M.copy()
        up[k] += h
        dn[k] -= h
        fd = (_nested(up, micros, prob)[0].compliance - _nested(dn, micros, prob)[0].compliance) / (2 * h)
        assert dM[k] == pytest.approx(fd, rel=1e-4)
    for cell, e in [(0, 5), (2, 40), (3, 63)]:
        up = [m.copy() for m in micros]
        dn = [m.copy() for m in micros]
        up[cell].flat[e] += h
        dn[cell].flat[e] -= h
        fd = (_nested(rho_M, up, prob)[0].compliance - _nested(rho_M, dn, prob)[0].compliance) / (2 * h)
        assert dm[cell][e] == pytest.approx(fd, rel=1e-2)


def test_displacement_adjoint_fd():
    rng = np.random.default_rng(1)
    nx, ny = 2, 2
    base = cantilever(nx, ny)
    gamma = np.zeros(base.n_dof)
    gamma[2 * node_index(nx, ny, nx) + 1] = 1.0
    gamma[2 * node_index(nx, 1, nx)] = 1.0
    u_t = gamma * -3.0
    prob = MacroProblem(nx, ny, base.fixed_dofs, base.force, gamma=gamma, u_target=u_t)
    micros = [rng.uniform(0.3, 1.0, (8, 8)) for _ in range(4)]
    ones = np.ones(4)
    s, EH, dEH = _nested(ones, micros, prob)
    grads = displacement_sensitivities(s, gamma, u_t, dEH)
    h = 1e-6
    for cell, e in [(1, 7), (3, 30)]:
        up = [m.copy() for m in micros]
        dn = [m.copy() for m in micros]
        up[cell].flat[e] += h
        dn[cell].flat[e] -= h
        Fp = displacement_objective(_nested(ones, up, prob)[0], gamma, u_t)
        Fm = displacement_objective(_nested(ones, dn, prob)[0], gamma, u_t)
        assert grads[cell][e] == pytest.approx((Fp - Fm) / (2 * h), rel=1e-2)


def test_displacement_objective_zero_at_own_solution():
    prob = cantilever()
    s = solve_macro(prob, np.repeat(plane_stress_tensor()[None], 6, axis=0))
    gamma = np.ones(prob.n_dof)
    assert displacement_objective(s, gamma, s.u) == 0.0


def test_gamma_must_be_binary():
    with pytest.raises(ValueError):
        MacroProblem(1, 1, [0, 1, 2], np.zeros(8), gamma=np.full(8, 0.5), u_target=np.zeros(8))


def test_simp_interpolation():
    EH = np.repeat(plane_stress_tensor()[None], 2, axis=0)
    out = simp_interpolate_macro(np.array([0.5, 1.0]), EH)
    np.testing.assert_allclose(out[0], simp_modulus(0.5) * EH[0])
    np.testing.assert_allclose(out[1], EH[1])
