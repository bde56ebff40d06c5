"""Coordinate batches for the density network.

Physical positions inside a patch are measured in cell units relative to the
centre of the patch's cell, so the cell itself spans ``[-0.5, 0.5]^2``.
Samples sit at element centres of a lattice with spacing ``1 / micro_res``.
Cell ``(i, j)`` is row ``i`` (growing along +y) and column ``j``; cell
indices are row-major, ``i * n_cells_x + j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALLOWED_EXTENSIONS = (1.0, 1.2, 1.6)
BOUNDARY_EXTENSION = 1.2


@dataclass(frozen=True)
class CellSpec:
    index: tuple[int, int]
    global_xy: tuple[float, float]
    vf_target: float
    tensor_weights: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    rotation: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.vf_target < 1.0:
            raise ValueError(f"cell {self.index}: vf_target must lie in (0, 1), got {self.vf_target}")
        w = np.asarray(self.tensor_weights, dtype=float)
        if w.shape != (3, 3) or not np.allclose(w, w.T):
            raise ValueError(f"cell {self.index}: tensor weights must be a symmetric 3x3 matrix")
        object.__setattr__(self, "tensor_weights", w)


@dataclass(frozen=True)
class MacroGrid:
    n_cells_x: int
    n_cells_y: int
    micro_res: int
    cell_specs: tuple[CellSpec, ...] = ()

    def __post_init__(self):
        if min(self.n_cells_x, self.n_cells_y, self.micro_res) < 1:
            raise ValueError("grid dimensions and micro resolution must be >= 1")
        if self.cell_specs and len(self.cell_specs) != self.n_cells:
            raise ValueError(f"expected {self.n_cells} cell specs, got {len(self.cell_specs)}")
        object.__setattr__(self, "cell_specs", tuple(self.cell_specs))

    @property
    def n_cells(self) -> int:
        return self.n_cells_x * self.n_cells_y

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_cells_y, self.n_cells_x

    def cell_index(self, i: int, j: int) -> int:
        return i * self.n_cells_x + j

    def global_x(self, j) -> np.ndarray:
        L = max(self.n_cells_x, self.n_cells_y)
        return (np.asarray(j, dtype=float) + 0.5 - self.n_cells_x / 2.0) / L

    def global_y(self, i) -> np.ndarray:
        L = max(self.n_cells_x, self.n_cells_y)
        return (np.asarray(i, dtype=float) + 0.5 - self.n_cells_y / 2.0) / L

    def rotations(self) -> np.ndarray:
        if not self.cell_specs:
            return np.zeros(self.n_cells)
        return np.array([s.rotation for s in self.cell_specs], dtype=float)

    def spec(self, i: int, j: int) -> CellSpec:
        return self.cell_specs[self.cell_index(i, j)]


def make_grid(n_cells_x: int, n_cells_y: int, micro_res: int, vf_target=0.5,
              weights=None, rotation=0.0) -> MacroGrid:
    """Grid whose cells share, or take per-cell (row-major), targets."""
    if weights is None:
        weights = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    weights = np.asarray(weights, dtype=float)
    shell = MacroGrid(n_cells_x, n_cells_y, micro_res)
    specs = []
    for i in range(n_cells_y):
        for j in range(n_cells_x):
            k = i * n_cells_x + j
            w = weights if weights.ndim == 2 else weights[k]
            vf = float(np.asarray(vf_target).ravel()[k]) if np.ndim(vf_target) else float(vf_target)
            rot = float(np.asarray(rotation).ravel()[k]) if np.ndim(rotation) else float(rotation)
            specs.append(CellSpec(index=(i, j), global_xy=(float(shell.global_x(j)), float(shell.global_y(i))),
                                  vf_target=vf, tensor_weights=w, rotation=rot))
    return MacroGrid(n_cells_x, n_cells_y, micro_res, tuple(specs))


@dataclass(frozen=True)
class CoordinateBatch:
    """Network inputs ``rows`` (N, d) with owning cell per row.

    When ``split`` is set the rows are the lattice sum
    ``row_part[r] + col_part[c]`` flattened row-major, optionally restricted
    to ``subset``.  ``points`` keeps the physical patch positions.
    """

    rows: np.ndarray
    owner: np.ndarray
    grid_shape: tuple[int, int]
    split: tuple[np.ndarray, np.ndarray] | None = None
    subset: np.ndarray | None = None
    points: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rows.shape[0]


def patch_size(extension: float, micro_res: int) -> int:
    """Samples per patch edge: ceil(ext * res), bumped so the unit cell stays lattice-aligned."""
    n = math.ceil(extension * micro_res - 1e-9)
    if (n - micro_res) % 2:
        n += 1
    return n


def lattice(n: int, res: int) -> np.ndarray:
    return (np.arange(n) - (n - 1) / 2.0) / res


def center_block(n_patch: int, micro_res: int) -> slice:
    off = (n_patch - micro_res) // 2
    return slice(off, off + micro_res)


def fold_offset(p) -> np.ndarray:
    """Nearest-integer cell offset with ties broken toward the centre cell."""
    p = np.asarray(p, dtype=float)
    return np.sign(p) * np.ceil(np.abs(p) - 0.5)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _fold_axes(spec: CellSpec, grid: MacroGrid, px: np.ndarray, py: np.ndarray):
    i, j = spec.index
    dx, dy = fold_offset(px), fold_offset(py)
    own_c = np.clip(j + dx.astype(int), 0, grid.n_cells_x - 1)
    own_r = np.clip(i + dy.astype(int), 0, grid.n_cells_y - 1)
    return own_r, own_c, py - dy, px - dx


def _assemble(spec, grid, px, py, fold: bool, subset=None) -> CoordinateBatch:
    nr, nc = py.size, px.size
    if fold:
        own_r, own_c, qy, qx = _fold_axes(spec, grid, px, py)
    else:
        i, j = spec.index
        own_r, own_c = np.full(nr, i), np.full(nc, j)
        qy, qx = py, px
    owner = (own_r[:, None] * grid.n_cells_x + own_c[None, :]).ravel()
    rot = grid.rotations()
    if not fold:
        rot_owner = np.full(owner.shape, spec.rotation)
    else:
        rot_owner = rot[owner]
    gx = grid.global_x(own_c)
    gy = grid.global_y(own_r)
    points = np.stack(np.broadcast_arrays(px[None, :], py[:, None]), axis=-1).reshape(-1, 2)

    if np.all(rot_owner == 0.0):
        row_part = np.zeros((nr, 4))
        row_part[:, 1], row_part[:, 3] = gy, qy
        col_part = np.zeros((nc, 4))
        col_part[:, 0], col_part[:, 2] = gx, qx
        rows = (row_part[:, None, :] + col_part[None, :, :]).reshape(-1, 4)
        split = (row_part, col_part)
    else:
        q = np.stack(np.broadcast_arrays(qx[None, :], qy[:, None]), axis=-1).reshape(-1, 2)
        c, s = np.cos(rot_owner), np.sin(rot_owner)
        u = c * q[:, 0] - s * q[:, 1]
        w = s * q[:, 0] + c * q[:, 1]
        X = np.broadcast_to(gx[None, :], (nr, nc)).ravel()
        Y = np.broadcast_to(gy[:, None], (nr, nc)).ravel()
        rows = np.stack([X, Y, u, w], axis=1)
        split = None
    if subset is not None:
        rows, owner, points = rows[subset], owner[subset], points[subset]
    return CoordinateBatch(rows=np.ascontiguousarray(rows), owner=owner, grid_shape=(nr, nc),
                           split=split, subset=None if split is None else subset, points=points)


def build_cell_patch(spec: CellSpec, grid: MacroGrid, extension: float = 1.2) -> CoordinateBatch:
    """Folded sample lattice over the patch ``[-ext/2, ext/2]^2`` around a cell."""
    if not any(abs(extension - e) < 1e-12 for e in ALLOWED_EXTENSIONS):
        raise ValueError(f"extension must be one of {ALLOWED_EXTENSIONS}, got {extension}")
    if spec.rotation != 0.0 and extension < 1.6:
        raise ValueError("rotated cells need the 1.6 patch extension")
    n = patch_size(extension, grid.micro_res)
    s = lattice(n, grid.micro_res)
    return _assemble(spec, grid, s, s, fold=True)


def build_boundary_regions(spec: CellSpec, grid: MacroGrid, resolution: int | None = None):
    """Row-aligned (centre, neighbour) batches over the band 0.5 < max|p| <= 0.6.

    The centre batch extrapolates the centre cell beyond its unit range; the
    neighbour batch folds the same points into the cells that own them.
    """
    res = grid.micro_res if resolution is None else resolution
    n = patch_size(BOUNDARY_EXTENSION, res)
    s = lattice(n, res)
    band = np.maximum(np.abs(s)[:, None], np.abs(s)[None, :]) > 0.5
    subset = np.flatnonzero(band.ravel())
    center = _assemble(spec, grid, s, s, fold=False, subset=subset)
    neighbor = _assemble(spec, grid, s, s, fold=True, subset=subset)
    return center, neighbor


def upsample_grid(grid: MacroGrid, factor: int = 1) -> CoordinateBatch:
    """Whole-domain lattice at ``factor * micro_res`` samples per cell edge."""
    if factor < 1:
        raise ValueError("upsampling factor must be >= 1")
    res = grid.micro_res * factor
    s = lattice(res, res)
    nr, nc = grid.n_cells_y * res, grid.n_cells_x * res
    cell_r = np.arange(nr) // res
    cell_c = np.arange(nc) // res
    qy = s[np.arange(nr) % res]
    qx = s[np.arange(nc) % res]
    owner = (cell_r[:, None] * grid.n_cells_x + cell_c[None, :]).ravel()
    gx, gy = grid.global_x(cell_c), grid.global_y(cell_r)
    points = np.stack(np.broadcast_arrays((cell_c + qx + 0.5)[None, :], (cell_r + qy + 0.5)[:, None]),
                      axis=-1).reshape(-1, 2)
    rot = grid.rotations()
    if np.all(rot == 0.0):
        row_part = np.zeros((nr, 4))
        row_part[:, 1], row_part[:, 3] = gy, qy
        col_part = np.zeros((nc, 4))
        col_part[:, 0], col_part[:, 2] = gx, qx
        rows = (row_part[:, None, :] + col_part[None, :, :]).reshape(-1, 4)
        return CoordinateBatch(rows=rows, owner=owner, grid_shape=(nr, nc),
                               split=(row_part, col_part), points=points)
    th = rot[owner]
    QX = np.broadcast_to(qx[None, :], (nr, nc)).ravel()
    QY = np.broadcast_to(qy[:, None], (nr, nc)).ravel()
    c, sn = np.cos(th), np.sin(th)
    rows = np.stack([np.broadcast_to(gx[None, :], (nr, nc)).ravel(),
                     np.broadcast_to(gy[:, None], (nr, nc)).ravel(),
                     c * QX - sn * QY, sn * QX + c * QY], axis=1)
    return CoordinateBatch(rows=rows, owner=owner, grid_shape=(nr, nc), points=points)


def macro_batch(grid: MacroGrid, factor: int = 1) -> CoordinateBatch:
    """Two-input (x, y) batch for the macro density network.

    ``factor = 1`` gives one sample per cell centre; larger factors give a
    finer lattice over the same normalized domain.
    """
    L = max(grid.n_cells_x, grid.n_cells_y)
    nr, nc = grid.n_cells_y * factor, grid.n_cells_x * factor
    gy = ((np.arange(nr) + 0.5) / factor - grid.n_cells_y / 2.0) / L
    gx = ((np.arange(nc) + 0.5) / factor - grid.n_cells_x / 2.0) / L
    row_part = np.zeros((nr, 2))
    row_part[:, 1] = gy
    col_part = np.zeros((nc, 2))
    col_part[:, 0] = gx
    rows = (row_part[:, None, :] + col_part[None, :, :]).reshape(-1, 2)
    owner = ((np.arange(nr) // factor)[:, None] * grid.n_cells_x + (np.arange(nc) // factor)[None, :]).ravel()
    return CoordinateBatch(rows=rows, owner=owner, grid_shape=(nr, nc), split=(row_part, col_part))
