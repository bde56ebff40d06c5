"""Run configuration: TOML parsing, validation and field expansion.

A config file looks like::

    mode = "inverse_homog_field"
    epochs = 300

    [grid]
    n_cells_x = 4
    n_cells_y = 4
    micro_res = 20

    [grid.vf]
    start = 0.4
    end = 0.56
    axis = "x"

    [grid.weights]
    preset = "bulk"

Per-cell fields (``grid.vf``, ``grid.rotation_deg`` and each weight ramp)
accept ``value``; ``start``/``end`` with ``axis`` in x, y or radial; or a
``table`` of rows listed bottom row first.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from msto.objectives import BULK_WEIGHTS, MODES, Schedules
from msto.sampling import ALLOWED_EXTENSIONS, MacroGrid, make_grid
from msto.macro_fe import MacroProblem, edge_traction_loads, node_index


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


VOIGT_ENTRIES = {"E11": (0, 0), "E12": (0, 1), "E13": (0, 2), "E22": (1, 1), "E23": (1, 2), "E33": (2, 2)}
PRESETS = {"bulk": BULK_WEIGHTS}

_SCHEMA = {
    "": {"mode", "epochs", "lr", "threshold", "simp_p", "e_min", "nu", "seed", "checkpoint_every",
         "grid", "network", "batch", "schedules", "macro", "export"},
    "grid": {"n_cells_x", "n_cells_y", "micro_res", "extension", "vf", "weights", "rotation_deg"},
    "grid.vf": {"value", "start", "end", "axis", "table"},
    "grid.rotation_deg": {"value", "start", "end", "axis", "table"},
    "grid.weights": {"preset", "matrix", "ramp"},
    "grid.weights.ramp": {"entry", "start", "end", "axis"},
    "network": {"n_kernels", "freq_scale", "weight_scale", "macro_kernels", "macro_freq_scale",
                "macro_weight_scale"},
    "batch": {"scheme", "k"},
    "schedules": {"alpha_start", "alpha_end", "beta_start_epoch", "beta_end"},
    "macro": {"vf_macro", "vf_micro", "supports", "loads", "tractions", "targets", "solid_cells"},
    "macro.supports": {"node", "edge", "dofs"},
    "macro.loads": {"node", "force"},
    "macro.tractions": {"edge", "traction", "cells"},
    "macro.targets": {"node", "dof", "value"},
    "export": {"images", "upsample", "figures"},
}


@dataclass(frozen=True)
class NetworkConfig:
    n_kernels: int = 5000
    freq_scale: float = 25.0
    weight_scale: float = 0.1
    macro_kernels: int = 1000
    macro_freq_scale: float = 5.0
    macro_weight_scale: float = 0.1


@dataclass(frozen=True)
class BatchConfig:
    scheme: str = "full"
    k: int = 1


@dataclass(frozen=True)
class ExportConfig:
    images: bool = True
    upsample: int = 2
    figures: bool = True


@dataclass
class RunConfig:
    mode: str
    grid: MacroGrid
    network: NetworkConfig = field(default_factory=NetworkConfig)
    epochs: int = 300
    lr: float = 0.002
    batch: BatchConfig = field(default_factory=BatchConfig)
    schedules: Schedules | None = None
    threshold: float = 0.4
    simp_p: float = 3.0
    e_min: float = 1e-9
    nu: float = 0.3
    seed: int = 0
    extension: float | None = None
    macro: MacroProblem | None = None
    export: ExportConfig = field(default_factory=ExportConfig)
    checkpoint_every: int = 25
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.schedules is None:
            self.schedules = Schedules(total_epochs=self.epochs)
        if self.extension is None:
            self.extension = 1.6 if np.any(self.grid.rotations() != 0.0) else 1.2
        if self.mode in ("concurrent", "metamaterial") and self.macro is None:
            raise ConfigError(f"macro: mode {self.mode!r} requires a [macro] section")
        if self.mode == "metamaterial" and self.macro.gamma is None:
            raise ConfigError("macro.targets: metamaterial mode needs displacement targets")
        validate_batch(self.batch, self.grid.n_cells)


def validate_batch(batch: BatchConfig, n_cells: int):
    if batch.scheme not in ("full", "minibatch", "miniepoch"):
        raise ConfigError(f"batch.scheme: unknown scheme {batch.scheme!r}")
    if batch.scheme != "full" and not 1 <= batch.k <= n_cells:
        raise ConfigError(f"batch.k: must lie in [1, {n_cells}], got {batch.k}")


def _check_keys(section: str, table: dict):
    allowed = _SCHEMA[section]
    unknown = sorted(set(table) - allowed)
    if unknown:
        where = section or "top level"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _get(section: str, table: dict, key: str, kind, default=None, required=False):
    name = f"{section}.{key}" if section else key
    if key not in table:
        if required:
            raise ConfigError(f"{name}: required field is missing")
        return default
    value = table[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {value!r}") from None


def _ramp_param(grid_shape, axis: str) -> np.ndarray:
    """Per-cell ramp coordinate t in [0, 1], row-major with row 0 at the bottom."""
    ny, nx = grid_shape
    i, j = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    if axis == "x":
        t = j / (nx - 1) if nx > 1 else np.zeros_like(j, dtype=float)
    elif axis == "y":
        t = i / (ny - 1) if ny > 1 else np.zeros_like(i, dtype=float)
    elif axis == "radial":
        # 0 at the centre, 1 at the farthest cell centre
        cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
        d = np.hypot(j - cx, i - cy)
        t = d / d.max() if d.max() > 0 else np.zeros_like(d)
    else:
        raise ConfigError(f"axis: expected x, y or radial, got {axis!r}")
    return np.asarray(t, dtype=float).ravel()


def expand_field(section: str, spec, grid_shape, default: float) -> np.ndarray:
    """Per-cell values (row-major) from a constant, ramp or table specification."""
    n = grid_shape[0] * grid_shape[1]
    if spec is None:
        return np.full(n, float(default))
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return np.full(n, float(spec))
    if not isinstance(spec, dict):
        raise ConfigError(f"{section}: expected a number or a table")
    _check_keys(section, spec)
    if "table" in spec:
        arr = np.asarray(spec["table"], dtype=float)
        if arr.shape != tuple(grid_shape):
            raise ConfigError(f"{section}.table: expected shape {tuple(grid_shape)}, got {arr.shape}")
        return arr.ravel()
    if "value" in spec:
        return np.full(n, _get(section, spec, "value", float))
    start = _get(section, spec, "start", float, required=True)
    end = _get(section, spec, "end", float, required=True)
    axis = _get(section, spec, "axis", str, "x")
    try:
        t = _ramp_param(grid_shape, axis)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc}") from None
    return start + t * (end - start)


def expand_weights(spec, grid_shape) -> np.ndarray:
    """Per-cell symmetric weight matrices, shape (n_cells, 3, 3)."""
    n = grid_shape[0] * grid_shape[1]
    spec = {"preset": "bulk"} if spec is None else spec
    _check_keys("grid.weights", spec)
    if "matrix" in spec:
        base = np.asarray(spec["matrix"], dtype=float)
        if base.shape != (3, 3) or not np.allclose(base, base.T):
            raise ConfigError("grid.weights.matrix: expected a symmetric 3x3 matrix")
    else:
        preset = spec.get("preset", "bulk")
        if preset not in PRESETS:
            raise ConfigError(f"grid.weights.preset: unknown preset {preset!r}")
        base = PRESETS[preset]
    W = np.repeat(base[None], n, axis=0).copy()
    for k, ramp in enumerate(spec.get("ramp", [])):
        section = f"grid.weights.ramp[{k}]"
        _check_keys("grid.weights.ramp", ramp)
        entry = _get(section, ramp, "entry", str, required=True)
        if entry not in VOIGT_ENTRIES:
            raise ConfigError(f"{section}.entry: expected one of {sorted(VOIGT_ENTRIES)}")
        a, b = VOIGT_ENTRIES[entry]
        start = _get(section, ramp, "start", float, required=True)
        end = _get(section, ramp, "end", float, required=True)
        axis = _get(section, ramp, "axis", str, "x")
        vals = start + _ramp_param(grid_shape, axis) * (end - start)
        W[:, a, b] = vals
        W[:, b, a] = vals
    return W


def _macro_problem(spec: dict, nx: int, ny: int) -> MacroProblem:
    _check_keys("macro", spec)
    n_dof = 2 * (nx + 1) * (ny + 1)
    axes = {"x": 0, "y": 1}

    def edge_nodes(section, edge):
        if edge == "left":
            return [node_index(nx, r, 0) for r in range(ny + 1)]
        if edge == "right":
            return [node_index(nx, r, nx) for r in range(ny + 1)]
        if edge == "bottom":
            return [node_index(nx, 0, c) for c in range(nx + 1)]
        if edge == "top":
            return [node_index(nx, ny, c) for c in range(nx + 1)]
        raise ConfigError(f"{section}.edge: unknown edge {edge!r}")

    def one_node(section, node):
        try:
            r, c = (int(v) for v in node)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.node: expected [row, col]") from None
        if not (0 <= r <= ny and 0 <= c <= nx):
            raise ConfigError(f"{section}.node: node {node} outside the macro mesh")
        return node_index(nx, r, c)

    fixed = []
    for k, sup in enumerate(spec.get("supports", [])):
        section = f"macro.supports[{k}]"
        _check_keys("macro.supports", sup)
        nodes = edge_nodes(section, sup["edge"]) if "edge" in sup else [one_node(section, sup.get("node"))]
        for d in sup.get("dofs", ["x", "y"]):
            if d not in axes:
                raise ConfigError(f"{section}.dofs: expected x or y, got {d!r}")
            fixed += [2 * n + axes[d] for n in nodes]
    if not fixed:
        raise ConfigError("macro.supports: at least one support is required")

    force = np.zeros(n_dof)
    for k, load in enumerate(spec.get("loads", [])):
        section = f"macro.loads[{k}]"
        _check_keys("macro.loads", load)
        n = one_node(section, load.get("node"))
        force[2 * n:2 * n + 2] += np.asarray(load["force"], dtype=float)
    for k, tr in enumerate(spec.get("tractions", [])):
        section = f"macro.tractions[{k}]"
        _check_keys("macro.tractions", tr)
        cells = tr.get("cells")
        cells = range(int(cells[0]), int(cells[1])) if cells is not None else None
        try:
            force += edge_traction_loads(nx, ny, tr["edge"], tr["traction"], cells)
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None

    gamma = u_t = None
    if spec.get("targets"):
        gamma, u_t = np.zeros(n_dof), np.zeros(n_dof)
        for k, tg in enumerate(spec["targets"]):
            section = f"macro.targets[{k}]"
            _check_keys("macro.targets", tg)
            n = one_node(section, tg.get("node"))
            d = tg.get("dof", "y")
            if d not in axes:
                raise ConfigError(f"{section}.dof: expected x or y")
            gamma[2 * n + axes[d]] = 1.0
            u_t[2 * n + axes[d]] = _get(section, tg, "value", float, required=True)

    solid = None
    if spec.get("solid_cells"):
        solid = np.zeros(nx * ny, dtype=bool)
        for i, j in spec["solid_cells"]:
            solid[int(i) * nx + int(j)] = True

    vf_M = _get("macro", spec, "vf_macro", float, 0.5)
    vf_m = _get("macro", spec, "vf_micro", float, 0.5)
    for name, v in (("vf_macro", vf_M), ("vf_micro", vf_m)):
        if not 0.0 < v < 1.0:
            raise ConfigError(f"macro.{name}: must lie in (0, 1), got {v}")
    return MacroProblem(nx, ny, fixed_dofs=np.array(fixed), force=force, gamma=gamma, u_target=u_t,
                        vf_macro=vf_M, vf_micro=vf_m, solid_mask=solid)


def config_from_dict(data: dict) -> RunConfig:
    """Validate a parsed config mapping and build the run configuration."""
    raw = copy.deepcopy(data)
    _check_keys("", data)
    mode = _get("", data, "mode", str, required=True)
    if mode not in MODES:
        raise ConfigError(f"mode: unknown mode {mode!r}; expected one of {MODES}")

    g = data.get("grid")
    if g is None:
        raise ConfigError("grid: required section is missing")
    _check_keys("grid", g)
    nx = _get("grid", g, "n_cells_x", int, required=True)
    ny = _get("grid", g, "n_cells_y", int, required=True)
    res = _get("grid", g, "micro_res", int, required=True)
    if nx < 1 or ny < 1:
        raise ConfigError("grid: n_cells_x and n_cells_y must be >= 1")
    if res < 2:
        raise ConfigError("grid.micro_res: must be >= 2")
    shape = (ny, nx)
    vf = expand_field("grid.vf", g.get("vf"), shape, 0.5)
    if np.any(vf <= 0.0) or np.any(vf >= 1.0):
        raise ConfigError(f"grid.vf: volume fraction targets must lie in (0, 1), got {vf.min()}..{vf.max()}")
    rot = np.deg2rad(expand_field("grid.rotation_deg", g.get("rotation_deg"), shape, 0.0))
    weights = expand_weights(g.get("weights"), shape)
    extension = g.get("extension", "auto")
    if extension == "auto":
        extension = None
    else:
        extension = _get("grid", g, "extension", float)
        if not any(abs(extension - e) < 1e-12 for e in ALLOWED_EXTENSIONS):
            raise ConfigError(f"grid.extension: expected one of {ALLOWED_EXTENSIONS} or 'auto'")
        if np.any(rot != 0.0) and extension < 1.6:
            raise ConfigError("grid.extension: rotated cells need extension 1.6")
    grid = make_grid(nx, ny, res, vf_target=vf, weights=weights, rotation=rot)

    net = data.get("network", {})
    _check_keys("network", net)
    network = NetworkConfig(
        n_kernels=_get("network", net, "n_kernels", int, 5000),
        freq_scale=_get("network", net, "freq_scale", float, 25.0),
        weight_scale=_get("network", net, "weight_scale", float, 0.1),
        macro_kernels=_get("network", net, "macro_kernels", int, 1000),
        macro_freq_scale=_get("network", net, "macro_freq_scale", float, 5.0),
        macro_weight_scale=_get("network", net, "macro_weight_scale", float, 0.1),
    )
    if network.n_kernels < 1 or network.macro_kernels < 1:
        raise ConfigError("network.n_kernels: must be >= 1")

    b = data.get("batch", {})
    _check_keys("batch", b)
    batch = BatchConfig(scheme=_get("batch", b, "scheme", str, "full"), k=_get("batch", b, "k", int, 1))

    epochs = _get("", data, "epochs", int, 300)
    s = data.get("schedules", {})
    _check_keys("schedules", s)
    schedules = Schedules(
        total_epochs=epochs,
        alpha_start=_get("schedules", s, "alpha_start", float, 1.0),
        alpha_end=_get("schedules", s, "alpha_end", float, 100.0),
        beta_start_epoch=_get("schedules", s, "beta_start_epoch", int, 50),
        beta_end=_get("schedules", s, "beta_end", float, 1.0),
    )

    macro = _macro_problem(data["macro"], nx, ny) if "macro" in data else None

    e = data.get("export", {})
    _check_keys("export", e)
    export = ExportConfig(images=_get("export", e, "images", bool, True),
                          upsample=_get("export", e, "upsample", int, 2),
                          figures=_get("export", e, "figures", bool, True))
    if export.upsample < 1:
        raise ConfigError("export.upsample: must be >= 1")

    threshold = _get("", data, "threshold", float, 0.4)
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold: must lie in (0, 1)")
    lr = _get("", data, "lr", float, 0.002)
    if lr <= 0.0:
        raise ConfigError("lr: must be positive")
    nu = _get("", data, "nu", float, 0.3)
    if not 0.0 <= nu < 0.5:
        raise ConfigError("nu: must lie in [0, 0.5)")

    return RunConfig(
        mode=mode, grid=grid, network=network, epochs=epochs, lr=lr, batch=batch,
        schedules=schedules, threshold=threshold,
        simp_p=_get("", data, "simp_p", float, 3.0),
        e_min=_get("", data, "e_min", float, 1e-9),
        nu=nu, seed=_get("", data, "seed", int, 0), extension=extension, macro=macro,
        export=export, checkpoint_every=_get("", data, "checkpoint_every", int, 25), raw=raw,
    )


def parse_config(path) -> RunConfig:
    """Read and validate a TOML run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def config_to_json(config: RunConfig) -> str:
    return json.dumps(config.raw, sort_keys=True)
