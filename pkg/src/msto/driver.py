"""End-to-end optimization loops for the three modes, plus thresholded evaluation."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from msto import field_net as fn
from msto.config import RunConfig
from msto.homogenize import (HomogenizationError, bulk_modulus, homogenized_tensor, hs_upper_bound,
                             solve_unit_cell, tensor_sensitivity)
from msto.macro_fe import (MacroSolveError, compliance_sensitivities, displacement_objective,
                           displacement_sensitivities, simp_interpolate_macro, solve_macro)
from msto.objectives import (CellTerms, GlobalTerms, LossBreakdown, combined_loss, normalization_constant,
                             rotated_objective)
from msto.sampling import (MacroGrid, build_boundary_regions, build_cell_patch, center_block, macro_batch,
                           patch_size)

log = logging.getLogger(__name__)

THREADS_ENV = "MSTO_THREADS"


class DriverError(RuntimeError):
    """An optimization epoch could not be completed."""


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def cell_groups(n_cells: int, k: int, grid_shape=None) -> list[list[int]]:
    """Partition cells into k fixed groups.

    When k is a perfect square s^2 and the grid is given, groups interleave
    in 2D (cell (i, j) goes to group (i % s) * s + j % s) so every group
    spreads over the whole domain; otherwise cells are dealt round-robin.
    """
    s = math.isqrt(k)
    if grid_shape is not None and s * s == k and k > 1:
        ny, nx = grid_shape
        groups = [[] for _ in range(k)]
        for i in range(ny):
            for j in range(nx):
                groups[(i % s) * s + j % s].append(i * nx + j)
    else:
        groups = [list(range(g, n_cells, k)) for g in range(k)]
    return [g for g in groups if g]


def select_cells(scheme: str, epoch: int, n_cells: int, k: int = 1, grid_shape=None) -> list[list[int]]:
    """Cell groups optimized in ``epoch`` (1-based), one optimizer step per group."""
    if scheme == "full":
        return [list(range(n_cells))]
    groups = cell_groups(n_cells, k, grid_shape)
    if scheme == "minibatch":
        return groups
    if scheme == "miniepoch":
        return [groups[(epoch - 1) % len(groups)]]
    raise ValueError(f"unknown batch scheme {scheme!r}")


@dataclass
class CellSetup:
    cell_id: int
    patch: object
    bc_center: object
    bc_neighbor: object
    n_patch: int
    center: slice
    objective_norm: float
    weights: np.ndarray
    rotation: float
    vf_target: float


@dataclass
class ConvergenceLog:
    records: list[dict] = field(default_factory=list)
    cell_objectives: list[np.ndarray] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: LossBreakdown, alpha: float, beta: float, cell_obj, seconds: float):
        self.records.append({"epoch": epoch, "objective": loss.objective_term, "volume": loss.volume_term,
                             "boundary": loss.boundary_term, "displacement": loss.displacement_term,
                             "total": loss.total, "alpha": alpha, "beta": beta})
        self.cell_objectives.append(np.asarray(cell_obj, dtype=float))
        self.seconds.append(seconds)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])


@dataclass
class RunResult:
    config: RunConfig
    params: fn.NetworkParams
    log: ConvergenceLog
    macro_params: fn.NetworkParams | None = None
    checkpoints: list = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class StepResult:
    loss: LossBreakdown
    grads: fn.Gradients
    macro_grads: fn.Gradients | None
    cell_objectives: dict
    extras: dict


class Trainer:
    """Holds the fixed sampling and FE setup of one run.

    ``cell_tensors`` keeps the latest homogenized tensor of every cell; the
    macro-scale modes reuse it for cells not selected in the current step.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.grid: MacroGrid = config.grid
        self.mode = config.mode
        self.macro = config.macro
        self.cells = [self._setup_cell(k) for k in range(self.grid.n_cells)]
        self.macro_batch = macro_batch(self.grid) if self.mode == "concurrent" else None
        self.cell_tensors = None
        self.compliance_norm = 1.0
        self.displacement_norm = 1.0
        if self.mode == "metamaterial":
            ut = self.macro.u_target
            self.displacement_norm = float(ut @ ut) if np.any(ut) else 1.0

    def _setup_cell(self, k: int) -> CellSetup:
        cfg = self.config
        spec = self.grid.cell_specs[k]
        patch = build_cell_patch(spec, self.grid, cfg.extension)
        bc_c, bc_n = build_boundary_regions(spec, self.grid)
        n = patch_size(cfg.extension, self.grid.micro_res)
        vf_target = spec.vf_target if self.mode != "concurrent" else self.macro.vf_micro
        if self.macro is not None and self.macro.solid_mask is not None and self.macro.solid_mask[k]:
            vf_target = 1.0  # pinned solid: no volume pressure
        norm = normalization_constant(spec.vf_target, spec.tensor_weights, cfg.simp_p, cfg.e_min, cfg.nu,
                                      spec.rotation) if self.config.mode != "concurrent" else 1.0
        return CellSetup(cell_id=k, patch=patch, bc_center=bc_c, bc_neighbor=bc_n, n_patch=n,
                         center=center_block(n, self.grid.micro_res), objective_norm=norm,
                         weights=spec.tensor_weights, rotation=spec.rotation, vf_target=vf_target)

    # -- network evaluation -------------------------------------------------

    def init_params(self):
        net = self.config.network
        params = fn.init_params(net.n_kernels, 4, self.config.seed, net.freq_scale, net.weight_scale)
        macro = None
        if self.mode == "concurrent":
            macro = fn.init_params(net.macro_kernels, 2, self.config.seed + 1, net.macro_freq_scale,
                                   net.macro_weight_scale)
        return params, macro

    def _solid(self, batch) -> np.ndarray | None:
        if self.macro is None or self.macro.solid_mask is None:
            return None
        return self.macro.solid_mask[batch.owner]

    def densities(self, params, batch, cache=None) -> np.ndarray:
        rho = fn.forward(params, batch, cache)
        solid = self._solid(batch)
        if solid is not None:
            rho = np.where(solid, 1.0, rho)
        return rho

    def _masked(self, batch, grad):
        solid = self._solid(batch)
        return grad if solid is None else np.where(solid, 0.0, grad)

    def _homogenize(self, rho_patch):
        cfg = self.config
        solve = solve_unit_cell(rho_patch, cfg.simp_p, cfg.e_min, cfg.nu)
        return homogenized_tensor(solve), tensor_sensitivity(solve)

    def prepare(self, params, macro_params=None):
        """Per-run state of the macro-scale modes, derived from the initial parameters.

        Every cell is homogenized once so unselected cells have a tensor, and
        the concurrent compliance is normalized by that of the initial design.
        """
        if self.mode not in ("concurrent", "metamaterial"):
            return
        self.initialize_tensors(params)
        if self.mode == "concurrent":
            self.compliance_norm = 1.0
            step = self.loss_and_grads(params, macro_params, [], 0)
            self.compliance_norm = step.extras["compliance"]

    def initialize_tensors(self, params):
        """Homogenize every cell with the given parameters."""
        cache = fn.FactorCache(params)
        rhos = [self.densities(params, c.patch, cache).reshape(c.n_patch, c.n_patch) for c in self.cells]
        fe = self._map_homogenize(rhos, epoch=0, ids=range(len(rhos)))
        self.cell_tensors = np.stack([EH for EH, _ in fe])

    def _map_homogenize(self, rhos, epoch, ids):
        def work(args):
            cid, rho = args
            try:
                return self._homogenize(rho)
            except (HomogenizationError, ValueError) as exc:
                i, j = self.grid.cell_specs[cid].index
                raise DriverError(f"epoch {epoch}: FE failure in cell ({i}, {j}): {exc}") from exc

        jobs = list(zip(ids, rhos))
        threads = thread_count()
        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(work, jobs))
        return [work(j) for j in jobs]

    # -- loss -----------------------------------------------------------------

    def loss_and_grads(self, params, macro_params, cell_ids, epoch: int) -> StepResult:
        cfg = self.config
        cache = fn.FactorCache(params)
        cells = [self.cells[k] for k in cell_ids]
        rhos = [self.densities(params, c.patch, cache).reshape(c.n_patch, c.n_patch) for c in cells]
        fe = self._map_homogenize(rhos, epoch, cell_ids)

        terms, cell_obj = [], {}
        for c, rho, (EH, dEH) in zip(cells, rhos, fe):
            t = CellTerms(patch_shape=rho.shape, center_slice=c.center, vf=float(rho[c.center, c.center].mean()),
                          vf_target=c.vf_target)
            if self.mode != "concurrent":
                obj, dobj_dE = rotated_objective(EH, c.weights, c.rotation)
                t.objective, t.objective_norm = obj, c.objective_norm
                t.dobj_drho = np.einsum("eab,ab->e", dEH, dobj_dE).reshape(rho.shape)
                cell_obj[c.cell_id] = obj / abs(c.objective_norm)
            t.bc_center = self.densities(params, c.bc_center, cache)
            t.bc_neighbor = self.densities(params, c.bc_neighbor, cache)
            terms.append(t)

        gterms, extras, macro_cache, rho_M = None, {}, None, None
        if self.mode in ("concurrent", "metamaterial"):
            if self.cell_tensors is None:
                raise DriverError("cell tensors not initialized; call initialize_tensors first")
            for k, (EH, _) in zip(cell_ids, fe):
                self.cell_tensors[k] = EH
            dEHs = [d for _, d in fe]
            if self.mode == "concurrent":
                macro_cache = fn.FactorCache(macro_params)
                rho_M = fn.forward(macro_params, self.macro_batch, macro_cache)
            else:
                rho_M = np.ones(self.grid.n_cells)
            tensors = simp_interpolate_macro(rho_M, self.cell_tensors, cfg.simp_p, cfg.e_min)
            try:
                solve = solve_macro(self.macro, tensors)
            except MacroSolveError as exc:
                raise DriverError(f"epoch {epoch}: macro FE failure: {exc}") from exc
            extras["compliance"] = solve.compliance
            extras["u"] = solve.u
            if self.mode == "concurrent":
                dCM, dCm = compliance_sensitivities(solve, rho_M, self.cell_tensors, dEHs, cfg.simp_p,
                                                    cfg.e_min, cell_ids=cell_ids)
                gterms = GlobalTerms(compliance=solve.compliance, compliance_norm=self.compliance_norm,
                                     vf_macro=float(rho_M.mean()), vf_macro_target=self.macro.vf_macro,
                                     n_macro=self.grid.n_cells, dcompliance_drhoM=dCM,
                                     dcompliance_drhom=[d.reshape(t.patch_shape) for d, t in zip(dCm, terms)])
                extras["vf_macro"] = float(rho_M.mean())
                extras["rho_M"] = rho_M
            else:
                F = displacement_objective(solve, self.macro.gamma, self.macro.u_target)
                dF = displacement_sensitivities(solve, self.macro.gamma, self.macro.u_target, dEHs,
                                                cell_ids=cell_ids)
                gterms = GlobalTerms(displacement=F, displacement_norm=self.displacement_norm,
                                     ddisplacement_drhom=[d.reshape(t.patch_shape) for d, t in zip(dF, terms)])
                extras["displacement"] = F

        loss, g = combined_loss(self.mode, terms, cfg.schedules, epoch, gterms)

        items = []
        for c, gp, gc, gn in zip(cells, g.patch, g.bc_center, g.bc_neighbor):
            items.append((c.patch, self._masked(c.patch, gp.ravel())))
            if gc is not None:
                items.append((c.bc_center, self._masked(c.bc_center, gc)))
                items.append((c.bc_neighbor, self._masked(c.bc_neighbor, gn)))
        grads = fn.backward_many(params, items, cache)
        macro_grads = None
        if self.mode == "concurrent":
            macro_grads = fn.backward(macro_params, self.macro_batch, g.macro, macro_cache)
        extras["vf"] = {c.cell_id: t.vf for c, t in zip(cells, terms)}
        return StepResult(loss=loss, grads=grads, macro_grads=macro_grads, cell_objectives=cell_obj,
                          extras=extras)

    # -- main loop ------------------------------------------------------------

    def run(self, params=None, macro_params=None, keep_checkpoints: bool = False, checkpoint_cb=None,
            freeze_micro: bool = False) -> RunResult:
        cfg = self.config
        if params is None:
            params, init_macro = self.init_params()
            macro_params = macro_params if macro_params is not None else init_macro
        state = fn.AdamState.for_params(params, lr=cfg.lr)
        macro_state = fn.AdamState.for_params(macro_params, lr=cfg.lr) if macro_params is not None else None
        self.prepare(params, macro_params)
        result = RunResult(config=cfg, params=params, log=ConvergenceLog(), macro_params=macro_params)
        if keep_checkpoints:
            result.checkpoints.append((0, params, macro_params))
        t_run = time.perf_counter()
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            groups = select_cells(cfg.batch.scheme, epoch, self.grid.n_cells, cfg.batch.k, self.grid.shape)
            total = LossBreakdown()
            cell_obj = np.full(self.grid.n_cells, np.nan)
            n_seen = sum(len(g) for g in groups)
            for ids in groups:
                step = self.loss_and_grads(params, macro_params, ids, epoch)
                total = total + step.loss.scaled(len(ids) / n_seen)
                for k, v in step.cell_objectives.items():
                    cell_obj[k] = v
                if not freeze_micro:
                    params, state = fn.adam_step(state, params, step.grads)
                if step.macro_grads is not None:
                    macro_params, macro_state = fn.adam_step(macro_state, macro_params, step.macro_grads)
            sched = cfg.schedules
            result.log.append(epoch, total, sched.alpha(epoch), sched.beta(epoch), cell_obj,
                              time.perf_counter() - t0)
            if epoch == 1 or epoch % 25 == 0 or epoch == cfg.epochs:
                log.info("epoch %d  total %.5f  obj %.5f  vol %.5f  bc %.5f  disp %.5f", epoch, total.total,
                         total.objective_term, total.volume_term, total.boundary_term, total.displacement_term)
            if cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                if keep_checkpoints:
                    result.checkpoints.append((epoch, params, macro_params))
                if checkpoint_cb is not None:
                    checkpoint_cb(epoch, params, macro_params)
        result.params, result.macro_params = params, macro_params
        result.wall_time = time.perf_counter() - t_run
        return result


def run(config: RunConfig, **kw) -> RunResult:
    return Trainer(config).run(**kw)


def run_inverse_homog_field(config: RunConfig, **kw) -> RunResult:
    if config.mode != "inverse_homog_field":
        raise ValueError(f"expected mode inverse_homog_field, got {config.mode!r}")
    return run(config, **kw)


def run_concurrent_multiscale(config: RunConfig, **kw) -> RunResult:
    if config.mode != "concurrent":
        raise ValueError(f"expected mode concurrent, got {config.mode!r}")
    return run(config, **kw)


def run_metamaterial(config: RunConfig, **kw) -> RunResult:
    if config.mode != "metamaterial":
        raise ValueError(f"expected mode metamaterial, got {config.mode!r}")
    return run(config, **kw)


@dataclass
class CellEvaluation:
    index: tuple[int, int]
    binary: np.ndarray
    vf_target: float
    vf_measured: float
    tensor: np.ndarray
    bulk: float
    hs_bound: float
    ratio: float
    flagged: bool = False


def threshold_and_evaluate(params, grid: MacroGrid, threshold: float = 0.4, simp_p: float = 3.0,
                           e_min: float = 1e-9, nu: float = 0.3, solid_mask=None) -> list[CellEvaluation]:
    """Binarize every unit cell and compare its bulk modulus with the HS bound."""
    cache = fn.FactorCache(params)
    out = []
    for spec in grid.cell_specs:
        batch = build_cell_patch(spec, grid, 1.0 if spec.rotation == 0.0 else 1.6)
        rho = fn.forward(params, batch, cache)
        n = batch.grid_shape[0]
        rho = rho.reshape(n, n)
        if spec.rotation != 0.0:
            rho = rho[center_block(n, grid.micro_res), center_block(n, grid.micro_res)]
        if solid_mask is not None and solid_mask[grid.cell_index(*spec.index)]:
            rho = np.ones_like(rho)
        binary = (rho >= threshold).astype(float)
        vf = float(binary.mean())
        if vf == 0.0:
            out.append(CellEvaluation(spec.index, binary, spec.vf_target, 0.0, np.zeros((3, 3)), 0.0, 0.0,
                                      math.nan, flagged=True))
            continue
        EH = homogenized_tensor(solve_unit_cell(binary, simp_p, e_min, nu))
        kappa = bulk_modulus(EH)
        hs = hs_upper_bound(vf, 1.0, nu)
        out.append(CellEvaluation(spec.index, binary, spec.vf_target, vf, EH, kappa, hs, kappa / hs))
    return out
