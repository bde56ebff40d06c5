"""Macro-scale bilinear quad FE with one element per microstructure cell.

Macro nodes form an (n_cells_y + 1) x (n_cells_x + 1) grid, node
``r * (n_cells_x + 1) + c`` at position (c, r) with r along +y; DOFs are
``2 * node`` (x) and ``2 * node + 1`` (y).  Element node order follows
:mod:`msto.homogenize`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from msto.homogenize import simp_derivative, simp_modulus

_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


class MacroSolveError(RuntimeError):
    pass


def _strain_matrix(xi: float, eta: float) -> np.ndarray:
    """B (3 x 8) of a unit square element at the reference point (xi, eta)."""
    dN_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dN_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    # unit square: x = (1 + xi) / 2, so d/dx = 2 d/dxi
    dN_dx, dN_dy = 2.0 * dN_dxi, 2.0 * dN_deta
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


def _stiffness_basis() -> np.ndarray:
    """KB[a, b] = integral of B[a]^T B[b] over the unit element, shape (3, 3, 8, 8)."""
    KB = np.zeros((3, 3, 8, 8))
    for xi in _GAUSS:
        for eta in _GAUSS:
            B = _strain_matrix(xi, eta)
            KB += 0.25 * np.einsum("ai,bj->abij", B, B)  # weight 1 x det J = 1/4
    return KB


STIFFNESS_BASIS = _stiffness_basis()


def element_stiffness(C) -> np.ndarray:
    """8x8 stiffness of a unit square element with constitutive tensor C."""
    return np.einsum("ab,abij->ij", np.asarray(C), STIFFNESS_BASIS)


def node_index(n_cells_x: int, r: int, c: int) -> int:
    return r * (n_cells_x + 1) + c


def macro_edof(n_cells_x: int, n_cells_y: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(n_cells_y), np.arange(n_cells_x), indexing="ij")
    r, c = r.ravel(), c.ravel()
    nx1 = n_cells_x + 1
    nodes = np.stack([r * nx1 + c, r * nx1 + c + 1, (r + 1) * nx1 + c + 1, (r + 1) * nx1 + c], axis=1)
    edof = np.empty((nodes.shape[0], 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    return edof


@dataclass
class MacroProblem:
    n_cells_x: int
    n_cells_y: int
    fixed_dofs: np.ndarray
    force: np.ndarray
    gamma: np.ndarray | None = None
    u_target: np.ndarray | None = None
    vf_macro: float = 0.5
    vf_micro: float = 0.5
    solid_mask: np.ndarray | None = None
    _edof: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        self.force = np.asarray(self.force, dtype=float)
        if self.force.shape != (self.n_dof,):
            raise ValueError(f"force vector must have {self.n_dof} entries")
        if self.fixed_dofs.size == 0:
            raise ValueError("at least one DOF must be fixed")
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=float)
            if not np.all(np.isin(self.gamma, (0.0, 1.0))):
                raise ValueError("gamma mask entries must be 0 or 1")
            self.u_target = np.asarray(self.u_target, dtype=float) * self.gamma
        if self.solid_mask is not None:
            self.solid_mask = np.asarray(self.solid_mask, dtype=bool).ravel()
        self._edof = macro_edof(self.n_cells_x, self.n_cells_y)

    @property
    def n_nodes(self) -> int:
        return (self.n_cells_x + 1) * (self.n_cells_y + 1)

    @property
    def n_dof(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_cells(self) -> int:
        return self.n_cells_x * self.n_cells_y

    @property
    def edof(self) -> np.ndarray:
        return self._edof

    def with_force(self, force) -> "MacroProblem":
        return MacroProblem(self.n_cells_x, self.n_cells_y, self.fixed_dofs, force, self.gamma,
                            self.u_target, self.vf_macro, self.vf_micro, self.solid_mask)


def edge_traction_loads(n_cells_x: int, n_cells_y: int, edge: str, traction, cells=None) -> np.ndarray:
    """Consistent nodal loads for a uniform traction on part of a domain edge.

    ``cells`` selects the element faces along the edge (default: all).
    """
    nx1 = n_cells_x + 1
    n_along = n_cells_x if edge in ("top", "bottom") else n_cells_y
    cells = range(n_along) if cells is None else cells
    f = np.zeros(2 * nx1 * (n_cells_y + 1))
    t = np.asarray(traction, dtype=float)
    for k in cells:
        if edge == "bottom":
            a, b = node_index(n_cells_x, 0, k), node_index(n_cells_x, 0, k + 1)
        elif edge == "top":
            a, b = node_index(n_cells_x, n_cells_y, k), node_index(n_cells_x, n_cells_y, k + 1)
        elif edge == "left":
            a, b = node_index(n_cells_x, k, 0), node_index(n_cells_x, k + 1, 0)
        elif edge == "right":
            a, b = node_index(n_cells_x, k, n_cells_x), node_index(n_cells_x, k + 1, n_cells_x)
        else:
            raise ValueError(f"unknown edge {edge!r}")
        for node in (a, b):
            f[2 * node:2 * node + 2] += 0.5 * t
    return f


def simp_interpolate_macro(rho_M, EH, simp_p: float = 3.0, c0: float = 1e-9) -> np.ndarray:
    """Per-cell effective tensors [c0 + rho^p (1 - c0)] EH, shape (n, 3, 3)."""
    return simp_modulus(rho_M, simp_p, c0)[:, None, None] * np.asarray(EH)


@dataclass
class MacroSolve:
    u: np.ndarray
    compliance: float
    free: np.ndarray
    K: sp.csc_matrix
    lu: object
    problem: MacroProblem
    residual: float

    def solve(self, rhs) -> np.ndarray:
        """Solve K x = rhs with homogeneous conditions on fixed DOFs, reusing the factorization."""
        x = np.zeros(self.problem.n_dof)
        x[self.free] = self.lu.solve(np.asarray(rhs, dtype=float)[self.free])
        return x

    def element_displacements(self) -> np.ndarray:
        return self.u[self.problem.edof]


def solve_macro(problem: MacroProblem, tensors) -> MacroSolve:
    """Linear solve K u = f with per-element anisotropic tensors."""
    tensors = np.asarray(tensors, dtype=float)
    if tensors.shape != (problem.n_cells, 3, 3):
        raise ValueError(f"expected {problem.n_cells} tensors of shape 3x3")
    if not np.all(np.isfinite(problem.force)):
        raise MacroSolveError("non-finite loads")
    ke = np.einsum("eab,abij->eij", tensors, STIFFNESS_BASIS)
    edof = problem.edof
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(problem.n_dof, problem.n_dof)).tocsc()
    free = np.setdiff1d(np.arange(problem.n_dof), problem.fixed_dofs)
    Kff = K[free][:, free].tocsc()
    try:
        lu = spla.splu(Kff)
    except RuntimeError as exc:
        raise MacroSolveError(f"singular macro stiffness matrix: {exc}") from exc
    u = np.zeros(problem.n_dof)
    u[free] = lu.solve(problem.force[free])
    if not np.all(np.isfinite(u)):
        raise MacroSolveError("macro solve produced non-finite displacements")
    fnorm = np.linalg.norm(problem.force[free])
    residual = float(np.linalg.norm(Kff @ u[free] - problem.force[free]) / fnorm) if fnorm else 0.0
    if residual > 1e-8:
        raise MacroSolveError(f"macro equilibrium residual {residual:.3e} exceeds 1e-8")
    compliance = 0.5 * float(problem.force @ u)
    return MacroSolve(u=u, compliance=compliance, free=free, K=K, lu=lu, problem=problem, residual=residual)


def _energy_tensors(ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """G_e[a, b] = ua_e^T KB[a, b] ub_e, symmetrized in (a, b); shape (n, 3, 3)."""
    G = np.einsum("ei,abij,ej->eab", ua, STIFFNESS_BASIS, ub, optimize=True)
    return 0.5 * (G + np.transpose(G, (0, 2, 1)))


def compliance_sensitivities(solve: MacroSolve, rho_M, EH, dEH_drho_m, simp_p: float = 3.0,
                             c0: float = 1e-9, cell_ids=None):
    """Derivatives of c = u^T K u / 2.

    Returns ``(dC_drhoM, dC_drhom)``; ``dC_drhom[k]`` has one entry per micro
    element of cell ``cell_ids[k]`` (default: all cells in order), following
    the row order of ``dEH_drho_m[k]``.
    """
    ue = solve.element_displacements()
    G = _energy_tensors(ue, ue)
    EH = np.asarray(EH)
    dC_drhoM = -0.5 * simp_derivative(rho_M, simp_p, c0) * np.einsum("eab,eab->e", G, EH)
    scale = simp_modulus(rho_M, simp_p, c0)
    ids = range(len(dEH_drho_m)) if cell_ids is None else cell_ids
    dC_drhom = [-0.5 * scale[i] * np.einsum("jab,ab->j", d, G[i]) for i, d in zip(ids, dEH_drho_m)]
    return dC_drhoM, dC_drhom


def displacement_objective(solve: MacroSolve, gamma, u_target) -> float:
    """F = || gamma * u - u_t ||^2 with u_t supported on the mask."""
    gamma = np.asarray(gamma, dtype=float)
    u_t = np.asarray(u_target, dtype=float)
    if gamma.shape != solve.u.shape or u_t.shape != solve.u.shape:
        raise ValueError("mask and target must match the displacement vector")
    r = gamma * solve.u - gamma * u_t
    return float(r @ r)


def displacement_sensitivities(solve: MacroSolve, gamma, u_target, dEH_drho_m, macro_scale=None,
                               cell_ids=None):
    """Adjoint gradient of F with respect to every micro element of every cell.

    Solves K lambda = 2 gamma (gamma u - u_t) with the stored factorization;
    dF/dx_j = -lambda^T dK/dx_j u.  ``macro_scale`` multiplies each cell's
    tensor (default 1, i.e. solid macro elements).
    """
    gamma = np.asarray(gamma, dtype=float)
    rhs = 2.0 * gamma * (gamma * solve.u - gamma * np.asarray(u_target, dtype=float))
    lam = solve.solve(rhs)
    edof = solve.problem.edof
    G = _energy_tensors(lam[edof], solve.u[edof])
    ids = range(len(dEH_drho_m)) if cell_ids is None else cell_ids
    s = np.ones(solve.problem.n_cells) if macro_scale is None else np.asarray(macro_scale, dtype=float)
    return [-s[i] * np.einsum("jab,ab->j", d, G[i]) for i, d in zip(ids, dEH_drho_m)]
