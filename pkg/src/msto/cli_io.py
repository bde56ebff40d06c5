"""Checkpoints, density images and CSV reports.

Checkpoint layout (``.npz``): arrays ``K`` and ``W`` for the cell network,
optional ``macro_K`` and ``macro_W`` for the macro network, and ``header``,
a 0-d string array holding JSON with ``n_kernels``, ``input_dim``, ``seed``,
``epoch``, ``format`` and the raw run ``config`` mapping.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from msto import field_net as fn
from msto.sampling import MacroGrid, macro_batch, upsample_grid

CHECKPOINT_FORMAT = 1

CONVERGENCE_COLUMNS = ("epoch", "objective", "volume", "boundary", "displacement", "total", "alpha", "beta")
CELL_COLUMNS = ("i", "j", "vf_target", "vf_measured", "E11", "E12", "E13", "E22", "E23", "E33", "bulk",
                "hs_bound", "ratio")
_TENSOR_IDX = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


@dataclass
class Checkpoint:
    params: fn.NetworkParams
    epoch: int
    config: dict
    macro_params: fn.NetworkParams | None = None

    @property
    def seed(self):
        return self.params.seed


def save_checkpoint(path, params: fn.NetworkParams, epoch: int, config_raw: dict,
                    macro_params: fn.NetworkParams | None = None):
    header = {"format": CHECKPOINT_FORMAT, "n_kernels": params.n_kernels, "input_dim": params.input_dim,
              "seed": params.seed, "epoch": int(epoch), "config": config_raw}
    arrays = {"K": params.K, "W": params.W, "header": np.array(json.dumps(header, sort_keys=True))}
    if macro_params is not None:
        header["macro_seed"] = macro_params.seed
        arrays["header"] = np.array(json.dumps(header, sort_keys=True))
        arrays["macro_K"], arrays["macro_W"] = macro_params.K, macro_params.W
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params = fn.NetworkParams(K=data["K"].copy(), W=data["W"].copy(), seed=header["seed"])
        macro = None
        if "macro_K" in data:
            macro = fn.NetworkParams(K=data["macro_K"].copy(), W=data["macro_W"].copy(),
                                     seed=header.get("macro_seed"))
    if params.n_kernels != header["n_kernels"] or params.input_dim != header["input_dim"]:
        raise ValueError(f"{path}: header does not match stored arrays")
    return Checkpoint(params=params, epoch=header["epoch"], config=header["config"], macro_params=macro)


# -- images -------------------------------------------------------------------

def density_pixels(densities) -> np.ndarray:
    """8-bit gray levels: 255 - floor(255 rho + 0.5), so solid is black and 0.5 maps to 127."""
    rho = np.asarray(densities, dtype=float)
    if rho.size and (rho.min() < 0.0 or rho.max() > 1.0 or not np.all(np.isfinite(rho))):
        raise ValueError("densities must lie in [0, 1]")
    return (255 - np.floor(255.0 * rho + 0.5)).astype(np.uint8)


def export_density_image(densities, grid_shape, path, fmt: str | None = None):
    """Write a grayscale image whose first row is the top of the picture."""
    rows, cols = grid_shape
    pix = density_pixels(np.asarray(densities).reshape(rows, cols))
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "pgm").lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "pgm":
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
    elif fmt == "png":
        import matplotlib.image as mpimg
        mpimg.imsave(path, pix, cmap="gray", vmin=0, vmax=255)
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def render_density(params: fn.NetworkParams, grid: MacroGrid, factor: int = 1, solid_mask=None) -> np.ndarray:
    """Whole-domain density field in image order (top row first)."""
    batch = upsample_grid(grid, factor)
    rho = fn.forward(params, batch)
    if solid_mask is not None:
        rho = np.where(np.asarray(solid_mask)[batch.owner], 1.0, rho)
    return np.flipud(rho.reshape(batch.grid_shape))


def render_macro_density(params: fn.NetworkParams, grid: MacroGrid) -> np.ndarray:
    return np.flipud(fn.forward(params, macro_batch(grid)).reshape(grid.shape))


# -- CSV ----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    """Rows as dicts; integer-looking columns come back as int, the rest as float."""
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({k: int(v) if k in ("epoch", "i", "j") else float(v) for k, v in row.items()})
        return out


def write_convergence_csv(log, path):
    _write_csv(path, CONVERGENCE_COLUMNS, ([r[c] for c in CONVERGENCE_COLUMNS] for r in log.records))


def write_timing_csv(log, path):
    _write_csv(path, ("epoch", "seconds"), ((r["epoch"], s) for r, s in zip(log.records, log.seconds)))


def write_cell_csv(evaluation, path):
    rows = []
    for e in evaluation:
        rows.append([e.index[0], e.index[1], e.vf_target, e.vf_measured,
                     *(e.tensor[a, b] for a, b in _TENSOR_IDX), e.bulk, e.hs_bound, e.ratio])
    _write_csv(path, CELL_COLUMNS, rows)


def export_reports(log, evaluation, path_prefix) -> dict:
    """Write ``<prefix>convergence.csv``, ``<prefix>timing.csv`` and ``<prefix>cells.csv``.

    An existing directory as prefix puts the plain file names inside it.
    Timing lives in its own file so the convergence log of a seeded run is
    reproducible byte for byte.
    """
    prefix = str(path_prefix)
    if Path(prefix).is_dir():
        prefix = os.path.join(prefix, "")
    paths = {}
    if log is not None:
        paths["convergence"] = Path(prefix + "convergence.csv")
        paths["timing"] = Path(prefix + "timing.csv")
        write_convergence_csv(log, paths["convergence"])
        write_timing_csv(log, paths["timing"])
    if evaluation is not None:
        paths["cells"] = Path(prefix + "cells.csv")
        write_cell_csv(evaluation, paths["cells"])
    return paths


def write_metadata(path, config_raw: dict, seed: int, n_params: int, wall_time: float, extra=None):
    record = {"config": config_raw, "seed": seed, "n_params": n_params, "wall_time_s": wall_time}
    if extra:
        record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
