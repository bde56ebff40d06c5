"""Loss terms, schedules and the per-mode combined losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from msto.homogenize import plane_stress_tensor, simp_modulus

MODES = ("inverse_homog_field", "concurrent", "metamaterial")

BULK_WEIGHTS = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Schedules:
    """Linear ramps for the volume (alpha) and boundary (beta) penalties.

    Epochs are 1-based.  alpha runs from ``alpha_start`` at epoch 1 to
    ``alpha_end`` at the final epoch; beta is zero before
    ``beta_start_epoch`` and reaches ``beta_end`` at the final epoch.
    """

    total_epochs: int = 300
    alpha_start: float = 1.0
    alpha_end: float = 100.0
    beta_start_epoch: int = 50
    beta_end: float = 1.0

    def alpha(self, epoch: int) -> float:
        if self.total_epochs <= 1:
            return self.alpha_end
        t = min(max((epoch - 1) / (self.total_epochs - 1), 0.0), 1.0)
        return self.alpha_start + t * (self.alpha_end - self.alpha_start)

    def beta(self, epoch: int) -> float:
        if epoch < self.beta_start_epoch:
            return 0.0
        span = self.total_epochs - self.beta_start_epoch
        if span <= 0:
            return self.beta_end
        return self.beta_end * min((epoch - self.beta_start_epoch) / span, 1.0)


@dataclass
class LossBreakdown:
    objective_term: float = 0.0
    volume_term: float = 0.0
    boundary_term: float = 0.0
    displacement_term: float = 0.0
    total: float = 0.0

    def scaled(self, s: float) -> "LossBreakdown":
        return LossBreakdown(*(s * v for v in self.as_tuple()))

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self):
        return (self.objective_term, self.volume_term, self.boundary_term,
                self.displacement_term, self.total)


def weighted_tensor_objective(EH, weights):
    """c = -sum_ij w_ij E_ij; returns ``(c, dc/dEH)``.

    The full double sum over a symmetric weight matrix counts each
    off-diagonal coefficient twice, so ``w12 = 0.75`` contributes
    ``1.5 * E12``.
    """
    w = np.asarray(weights, dtype=float)
    if not np.allclose(w, w.T):
        raise ValueError("tensor weights must be symmetric")
    return float(-np.sum(w * np.asarray(EH))), -w


def voigt_rotation(theta: float) -> np.ndarray:
    """Strain map T with eps_rot = T eps for eps -> R eps R^T (engineering shear)."""
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    T = np.zeros((3, 3))
    for k, (exx, eyy, gxy) in enumerate(np.eye(3)):
        eps = np.array([[exx, 0.5 * gxy], [0.5 * gxy, eyy]])
        r = R @ eps @ R.T
        T[:, k] = (r[0, 0], r[1, 1], 2.0 * r[0, 1])
    return T


def rotate_tensor(EH, theta: float) -> np.ndarray:
    """E' = T(theta)^T E T(theta).

    For a design sampled in material coordinates ``(u, w) = R(theta) q``,
    ``rotate_tensor(E_material, theta)`` is its tensor in the physical frame.
    """
    T = voigt_rotation(theta)
    return T.T @ np.asarray(EH) @ T


def rotated_objective(EH_physical, weights, theta: float):
    """Weighted objective of a physical-frame tensor read in the cell's material frame."""
    if theta == 0.0:
        return weighted_tensor_objective(EH_physical, weights)
    T = voigt_rotation(-theta)
    c, dc_dmat = weighted_tensor_objective(T.T @ np.asarray(EH_physical) @ T, weights)
    return c, T @ dc_dmat @ T.T


def volume_penalty(vf_current: float, vf_target: float, alpha: float, n_samples: int = 1):
    """alpha (V/V* - 1)^2 and its derivative per sample (dV/drho_e = 1/n)."""
    if vf_target <= 0.0:
        raise ValueError("volume fraction target must be positive")
    r = vf_current / vf_target - 1.0
    return alpha * r * r, 2.0 * alpha * r / vf_target / n_samples


def boundary_loss(center_densities, neighbor_densities):
    """Mean absolute mismatch and its per-sample (centre, neighbour) subgradients."""
    c = np.asarray(center_densities, dtype=float)
    n = np.asarray(neighbor_densities, dtype=float)
    if c.shape != n.shape:
        raise ValueError(f"boundary batches differ in length: {c.shape} vs {n.shape}")
    if c.size == 0:
        return 0.0, c.copy(), n.copy()
    d = n - c
    sgn = np.sign(d) / d.size
    return float(np.abs(d).mean()), -sgn, sgn


def normalization_constant(vf_target: float, weights, simp_p: float = 3.0, e_min: float = 1e-9,
                           nu: float = 0.3, theta: float = 0.0) -> float:
    """Objective of a uniform cell at the target volume fraction (no FE solve needed)."""
    if not 0.0 < vf_target <= 1.0:
        raise ValueError("volume fraction target must lie in (0, 1]")
    EH = simp_modulus(vf_target, simp_p, e_min) * plane_stress_tensor(1.0, nu)
    c0, _ = rotated_objective(rotate_tensor(EH, theta), weights, theta)
    if abs(c0) < 1e-14:
        raise ValueError("normalization constant is zero; weights are degenerate")
    return c0


@dataclass
class CellTerms:
    """Per-cell inputs to the combined loss.

    ``dobj_drho`` is d(objective)/d(patch densities), already chained through
    the homogenization sensitivities.  ``center_slice`` selects the unit cell
    inside the patch grid for the volume measurement.
    """

    patch_shape: tuple[int, int]
    center_slice: slice
    vf: float
    vf_target: float
    objective: float = 0.0
    objective_norm: float = 1.0
    dobj_drho: np.ndarray | None = None
    bc_center: np.ndarray | None = None
    bc_neighbor: np.ndarray | None = None


@dataclass
class GlobalTerms:
    """Structure-level terms for the concurrent and metamaterial modes."""

    compliance: float = 0.0
    compliance_norm: float = 1.0
    vf_macro: float = 0.0
    vf_macro_target: float = 1.0
    n_macro: int = 1
    dcompliance_drhoM: np.ndarray | None = None
    displacement: float = 0.0
    displacement_norm: float = 1.0
    # per selected cell, d(term)/d(patch densities)
    dcompliance_drhom: list = field(default_factory=list)
    ddisplacement_drhom: list = field(default_factory=list)


@dataclass
class LossGradients:
    patch: list  # per cell, (n, n) dL/d patch densities
    bc_center: list  # per cell, dL/d centre boundary densities
    bc_neighbor: list
    macro: np.ndarray | None = None  # dL/d rho_M, concurrent mode only


def combined_loss(mode: str, cells: list[CellTerms], schedules: Schedules, epoch: int,
                  global_terms: GlobalTerms | None = None):
    """Assemble the mode's loss and the per-sample density gradients.

    inverse_homog_field: mean_i [c_i/|c0_i| + alpha (V_i/V*_i - 1)^2 + beta Lbc_i]
    concurrent:          c/c0 + alpha (V_M/V*_M - 1)^2 + mean_i [alpha (V_i/V*_m - 1)^2 + beta Lbc_i]
    metamaterial:        mean_i [c_i/|c0_i| + alpha (V_i/V*_i - 1)^2 + beta Lbc_i] + alpha F/F0
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode != "inverse_homog_field" and global_terms is None:
        raise ValueError(f"mode {mode!r} needs structure-level terms")
    alpha, beta = schedules.alpha(epoch), schedules.beta(epoch)
    n = max(len(cells), 1)
    out = LossBreakdown()
    grads = LossGradients(patch=[], bc_center=[], bc_neighbor=[])

    for k, cell in enumerate(cells):
        g = np.zeros(cell.patch_shape)
        if mode != "concurrent":
            scale = 1.0 / abs(cell.objective_norm)
            out.objective_term += cell.objective * scale / n
            if cell.dobj_drho is not None:
                g += cell.dobj_drho * scale / n
        n_center = (cell.center_slice.stop - cell.center_slice.start) ** 2
        vol, dvol = volume_penalty(cell.vf, cell.vf_target, alpha, n_center)
        out.volume_term += vol / n
        g[cell.center_slice, cell.center_slice] += dvol / n
        if cell.bc_center is not None and cell.bc_center.size:
            lbc, dc, dn = boundary_loss(cell.bc_center, cell.bc_neighbor)
            out.boundary_term += beta * lbc / n
            grads.bc_center.append(beta * dc / n)
            grads.bc_neighbor.append(beta * dn / n)
        else:
            grads.bc_center.append(None)
            grads.bc_neighbor.append(None)
        grads.patch.append(g)

    if mode == "concurrent":
        gt = global_terms
        out.objective_term = gt.compliance / gt.compliance_norm
        for k in range(len(cells)):
            grads.patch[k] = grads.patch[k] + gt.dcompliance_drhom[k] / gt.compliance_norm
        vol, dvol = volume_penalty(gt.vf_macro, gt.vf_macro_target, alpha, gt.n_macro)
        out.volume_term += vol
        grads.macro = np.asarray(gt.dcompliance_drhoM) / gt.compliance_norm + dvol
    elif mode == "metamaterial":
        gt = global_terms
        out.displacement_term = alpha * gt.displacement / gt.displacement_norm
        for k in range(len(cells)):
            grads.patch[k] = grads.patch[k] + alpha * gt.ddisplacement_drhom[k] / gt.displacement_norm

    out.total = out.objective_term + out.volume_term + out.boundary_term + out.displacement_term
    return out, grads
