"""Energy-based periodic homogenization of a square-element unit cell.

The cell is a grid of unit-size bilinear quads indexed ``[row, col]`` with
rows running along +y.  Element nodes are ordered counter-clockwise from the
lower-left corner, so the element DOF vector is
``(x0, y0, x1, y1, x2, y2, x3, y3)`` for nodes (0,0), (1,0), (1,1), (0,1).

Strains and stresses use Voigt order (11, 22, 12) with engineering shear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DIRECT_SOLVE_LIMIT = 64 * 64
RESIDUAL_TOL = 1e-8


class HomogenizationError(RuntimeError):
    """Raised when a unit-cell problem cannot be solved."""


def base_element_stiffness(nu: float = 0.3) -> np.ndarray:
    """Plane-stress stiffness of a unit square bilinear element with E = 1."""
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in [0, 0.5), got {nu}")
    a11 = np.array([[12, 3, -6, -3], [3, 12, 3, 0], [-6, 3, 12, -3], [-3, 0, -3, 12]], float)
    a12 = np.array([[-6, -3, 0, 3], [-3, -6, -3, -6], [0, -3, -6, 3], [3, -6, 3, -6]], float)
    b11 = np.array([[-4, 3, -2, 9], [3, -4, -9, 4], [-2, -9, -4, -3], [9, 4, -3, -4]], float)
    b12 = np.array([[2, -3, 4, -9], [-3, 2, 9, -2], [4, 9, 2, 3], [-9, -2, 3, 2]], float)
    a = np.block([[a11, a12], [a12.T, a11]])
    b = np.block([[b11, b12], [b12.T, b11]])
    return (a + nu * b) / (24.0 * (1.0 - nu**2))


def plane_stress_tensor(E0: float = 1.0, nu: float = 0.3) -> np.ndarray:
    k = E0 / (1.0 - nu**2)
    return k * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]])


def simp_modulus(rho, simp_p: float = 3.0, e_min: float = 1e-9):
    return e_min + np.asarray(rho, dtype=float) ** simp_p * (1.0 - e_min)


def simp_derivative(rho, simp_p: float = 3.0, e_min: float = 1e-9):
    rho = np.asarray(rho, dtype=float)
    if simp_p == 1.0:
        return np.full_like(rho, 1.0 - e_min)
    return simp_p * rho ** (simp_p - 1.0) * (1.0 - e_min)


def bulk_modulus(tensor: np.ndarray) -> float:
    """2D bulk modulus (E11 + E22 + 2 E12) / 4 of a Voigt tensor."""
    t = np.asarray(tensor)
    return float((t[0, 0] + t[1, 1] + 2.0 * t[0, 1]) / 4.0)


def hs_upper_bound(vf: float, E0: float = 1.0, nu: float = 0.3) -> float:
    """Hashin-Shtrikman upper bound on the 2D bulk modulus of a solid/void mix."""
    if not 0.0 <= vf <= 1.0:
        raise ValueError(f"volume fraction must lie in [0, 1], got {vf}")
    kappa0 = E0 / (2.0 * (1.0 - nu))
    mu0 = E0 / (2.0 * (1.0 + nu))
    return vf * kappa0 * mu0 / ((1.0 - vf) * kappa0 + mu0)


# affine nodal displacements of a unit element under the three unit test strains
_NODE_XY = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _affine_element_fields() -> np.ndarray:
    ue0 = np.zeros((8, 3))
    for k, (exx, eyy, gxy) in enumerate(np.eye(3)):
        ux = exx * _NODE_XY[:, 0] + 0.5 * gxy * _NODE_XY[:, 1]
        uy = 0.5 * gxy * _NODE_XY[:, 0] + eyy * _NODE_XY[:, 1]
        ue0[0::2, k] = ux
        ue0[1::2, k] = uy
    return ue0


UE0 = _affine_element_fields()


def periodic_edof(n_rows: int, n_cols: int) -> np.ndarray:
    """Element-to-DOF map on the periodic (wrapped) node set, shape (N, 8)."""
    r, c = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    r, c = r.ravel(), c.ravel()

    def node(rr, cc):
        return (rr % n_rows) * n_cols + (cc % n_cols)

    nodes = np.stack([node(r, c), node(r, c + 1), node(r + 1, c + 1), node(r + 1, c)], axis=1)
    edof = np.empty((nodes.shape[0], 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    return edof


@dataclass(frozen=True)
class UnitCellSolve:
    """Solved unit-cell state for the three unit test strains.

    ``fluctuation`` has shape (3, n_dof) over the periodic node set;
    ``element_fields`` holds the per-element total displacement
    (affine + fluctuation) for each test strain, shape (N, 8, 3).
    """

    density: np.ndarray
    fluctuation: np.ndarray
    element_fields: np.ndarray
    simp_p: float
    e_min: float
    nu: float
    residual: float

    @property
    def element_count(self) -> int:
        return self.density.size

    def element_energies(self) -> np.ndarray:
        """Unit-modulus mutual energies Q_e[i, j] = chi_i^T k0 chi_j, shape (N, 3, 3)."""
        k0 = base_element_stiffness(self.nu)
        chi = self.element_fields
        return np.einsum("eai,ab,ebj->eij", chi, k0, chi, optimize=True)


def _solve_system(K: sp.csc_matrix, F: np.ndarray, solver: str) -> np.ndarray:
    if solver == "direct":
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
        return lu.solve(F)
    diag = K.diagonal()
    M = sp.diags(1.0 / diag)
    out = np.zeros_like(F)
    for k in range(F.shape[1]):
        rhs = F[:, k]
        if not np.any(rhs):
            continue
        x, info = spla.cg(K, rhs, rtol=RESIDUAL_TOL * 1e-2, atol=0.0, M=M, maxiter=20 * K.shape[0])
        if info != 0:
            res = np.linalg.norm(K @ x - rhs) / np.linalg.norm(rhs)
            raise HomogenizationError(f"conjugate gradient did not converge (relative residual {res:.3e})")
        out[:, k] = x
    return out


def solve_unit_cell(density, simp_p: float = 3.0, e_min: float = 1e-9, nu: float = 0.3,
                    solver: str = "auto") -> UnitCellSolve:
    """Solve the periodic cell problem for the three unit test strains.

    Node 0 is pinned to remove the rigid translation.  ``solver`` is
    ``"direct"``, ``"cg"`` or ``"auto"`` (direct up to 64 x 64 elements).
    """
    rho = np.asarray(density, dtype=float)
    if rho.ndim != 2 or min(rho.shape) < 2:
        raise ValueError(f"density grid must be 2D with at least 2 elements per edge, got {rho.shape}")
    if np.any(rho < 0.0) or np.any(rho > 1.0) or not np.all(np.isfinite(rho)):
        raise ValueError("densities must lie in [0, 1]")
    if not np.any(rho > 0.0):
        raise HomogenizationError("all-void cell: stiffness matrix is singular")
    if solver == "auto":
        solver = "direct" if rho.size <= DIRECT_SOLVE_LIMIT else "cg"

    n_rows, n_cols = rho.shape
    n_dof = 2 * n_rows * n_cols
    k0 = base_element_stiffness(nu)
    edof = periodic_edof(n_rows, n_cols)
    moduli = simp_modulus(rho.ravel(), simp_p, e_min)

    vals = (moduli[:, None, None] * k0[None]).ravel()
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n_dof, n_dof)).tocsc()

    fe = -(k0 @ UE0)  # (8, 3)
    F = np.zeros((n_dof, 3))
    for k in range(3):
        np.add.at(F[:, k], edof, moduli[:, None] * fe[None, :, k])

    free = np.arange(2, n_dof)
    Kff = K[free][:, free].tocsc()
    Ff = F[free]
    U = np.zeros((n_dof, 3))
    scale = np.linalg.norm(Ff)
    residual = 0.0
    if scale > 1e-14 * np.sqrt(n_dof):
        try:
            U[free] = _solve_system(Kff, Ff, solver)
        except RuntimeError as exc:
            if isinstance(exc, HomogenizationError):
                raise
            raise HomogenizationError(f"factorization failed: {exc}") from exc
        residual = float(np.linalg.norm(Kff @ U[free] - Ff) / scale)
        if not np.isfinite(residual) or residual > RESIDUAL_TOL:
            raise HomogenizationError(f"unit-cell solve residual {residual:.3e} exceeds {RESIDUAL_TOL}")

    chi = U[edof] + UE0[None]  # (N, 8, 3)
    return UnitCellSolve(density=rho, fluctuation=U.T.copy(), element_fields=chi,
                         simp_p=simp_p, e_min=e_min, nu=nu, residual=residual)


def homogenized_tensor(solve: UnitCellSolve) -> np.ndarray:
    """Homogenized Voigt tensor averaged over the cell area."""
    q = solve.element_energies()
    moduli = simp_modulus(solve.density.ravel(), solve.simp_p, solve.e_min)
    EH = np.einsum("e,eij->ij", moduli, q) / solve.element_count
    return 0.5 * (EH + EH.T)


def tensor_sensitivity(solve: UnitCellSolve, simp_p: float | None = None,
                       e_min: float | None = None) -> np.ndarray:
    """Per-element derivative of the homogenized tensor, shape (N, 3, 3).

    Rows follow ``density.ravel()`` ordering.
    """
    p = solve.simp_p if simp_p is None else simp_p
    c0 = solve.e_min if e_min is None else e_min
    q = solve.element_energies()
    dmod = simp_derivative(solve.density.ravel(), p, c0)
    dEH = dmod[:, None, None] * q / solve.element_count
    return 0.5 * (dEH + np.transpose(dEH, (0, 2, 1)))


def homogenize(density, simp_p: float = 3.0, e_min: float = 1e-9, nu: float = 0.3):
    """Convenience wrapper returning ``(EH, dEH)`` for a density grid."""
    solve = solve_unit_cell(density, simp_p, e_min, nu)
    return homogenized_tensor(solve), tensor_sensitivity(solve)
