"""Coordinate density network rho(X) = sigmoid(sum_k W_k sin((K X)_k + 1)).

Forward and backward passes are analytic.  Batches that carry a separable
lattice structure (``X[r, c] = row_part[r] + col_part[c]``) are evaluated
through complex exponentials, which turns the per-sample sine evaluations
into two small matrix products; every other batch goes through a chunked
direct evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from msto.sampling import CoordinateBatch

PHASE = 1.0
CHUNK_ROWS = 2048


@dataclass(frozen=True)
class NetworkParams:
    K: np.ndarray  # (n_kernels, input_dim)
    W: np.ndarray  # (n_kernels,)
    seed: int | None = None

    def __post_init__(self):
        if self.K.ndim != 2 or self.W.ndim != 1 or self.K.shape[0] != self.W.shape[0]:
            raise ValueError(f"inconsistent parameter shapes K{self.K.shape} W{self.W.shape}")
        if self.K.shape[0] < 1:
            raise ValueError("network needs at least one kernel")

    @property
    def n_kernels(self) -> int:
        return self.K.shape[0]

    @property
    def input_dim(self) -> int:
        return self.K.shape[1]

    @property
    def n_params(self) -> int:
        return self.K.size + self.W.size


@dataclass(frozen=True)
class Gradients:
    K: np.ndarray
    W: np.ndarray

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(self.K + other.K, self.W + other.W)

    def scaled(self, s: float) -> "Gradients":
        return Gradients(self.K * s, self.W * s)

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "Gradients":
        return cls(np.zeros_like(params.K), np.zeros_like(params.W))


def init_params(n_kernels: int = 5000, input_dim: int = 4, seed: int = 0,
                freq_scale: float = 25.0, weight_scale: float = 0.1) -> NetworkParams:
    """K ~ U(-freq_scale, freq_scale), W ~ U(-weight_scale, weight_scale)."""
    if n_kernels < 1:
        raise ValueError("n_kernels must be >= 1")
    rng = np.random.default_rng(seed)
    K = rng.uniform(-1.0, 1.0, size=(n_kernels, input_dim)) * freq_scale
    W = rng.uniform(-1.0, 1.0, size=n_kernels) * weight_scale
    return NetworkParams(K=K, W=W, seed=seed)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check_batch(params: NetworkParams, batch: CoordinateBatch):
    if batch.rows.shape[1] != params.input_dim:
        raise ValueError(f"batch has {batch.rows.shape[1]} inputs, network expects {params.input_dim}")


def _lattice_key(batch: CoordinateBatch):
    row_part, col_part = batch.split
    return row_part.shape, col_part.shape, row_part.tobytes(), col_part.tobytes()


class FactorCache:
    """Per-parameter-state memo for lattice evaluation.

    ``exp(i K[:, d] v)`` is computed once per distinct coordinate value, and
    lattice factors plus pre-activations are kept per distinct lattice, so
    batches sharing a lattice (a patch and the folded boundary band inside
    it) and a forward/backward pair reuse the same work.  Valid only while
    ``params`` is unchanged.
    """

    def __init__(self, params: NetworkParams):
        self.params = params
        self._axis: dict[tuple[int, float], np.ndarray] = {}
        self._lattice: dict[tuple, dict] = {}

    def _axis_exp(self, d: int, v: float) -> np.ndarray:
        key = (d, v)
        e = self._axis.get(key)
        if e is None:
            e = np.exp(1j * v * self.params.K[:, d])
            self._axis[key] = e
        return e

    def _part_exp(self, part: np.ndarray, phase: float) -> np.ndarray:
        out = None
        for d in range(part.shape[1]):
            col = part[:, d]
            if not np.any(col):
                continue
            vals, inv = np.unique(col, return_inverse=True)
            table = np.stack([self._axis_exp(d, float(v)) for v in vals])[inv]
            out = table if out is None else out * table
        if out is None:
            out = np.ones((part.shape[0], self.params.n_kernels), dtype=complex)
        return out * np.exp(1j * phase) if phase else out

    def entry(self, batch: CoordinateBatch) -> dict:
        key = _lattice_key(batch)
        hit = self._lattice.get(key)
        if hit is None:
            row_part, col_part = batch.split
            hit = {"A": self._part_exp(col_part, PHASE), "B": self._part_exp(row_part, 0.0)}
            self._lattice[key] = hit
        return hit


def _lattice_entry(params: NetworkParams, batch: CoordinateBatch, cache: FactorCache | None) -> dict:
    if cache is not None:
        if cache.params is not params:
            raise ValueError("factor cache belongs to a different parameter state")
        return cache.entry(batch)
    row_part, col_part = batch.split
    return {"A": np.exp(1j * (col_part @ params.K.T + PHASE)),  # (nc, nk)
            "B": np.exp(1j * (row_part @ params.K.T))}  # (nr, nk)


def _lattice_preactivation(params, entry) -> np.ndarray:
    a = entry.get("a")
    if a is None:
        a = ((entry["B"] * params.W) @ entry["A"].T).imag  # (nr, nc)
        entry["a"] = a
    return a


def _preactivation(params: NetworkParams, batch: CoordinateBatch, cache=None) -> np.ndarray:
    if batch.split is not None:
        a = _lattice_preactivation(params, _lattice_entry(params, batch, cache)).ravel()
        return a if batch.subset is None else a[batch.subset]
    X = batch.rows
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], CHUNK_ROWS):
        Z = X[s:s + CHUNK_ROWS] @ params.K.T + PHASE
        out[s:s + CHUNK_ROWS] = np.sin(Z) @ params.W
    return out


def forward(params: NetworkParams, batch: CoordinateBatch, cache: FactorCache | None = None) -> np.ndarray:
    """Densities in (0, 1), one per batch row."""
    _check_batch(params, batch)
    return sigmoid(_preactivation(params, batch, cache))


def _check_grad(batch: CoordinateBatch, dL_drho) -> np.ndarray:
    dL_drho = np.asarray(dL_drho, dtype=float)
    if dL_drho.shape != (batch.rows.shape[0],):
        raise ValueError(f"gradient length {dL_drho.shape} does not match batch of {batch.rows.shape[0]}")
    return dL_drho


def _lattice_backward(params, batch, entry, G) -> Gradients:
    row_part, col_part = batch.split
    a = _lattice_preactivation(params, entry)
    rho = sigmoid(a)
    G = G * rho * (1.0 - rho)
    A, B = entry["A"], entry["B"]
    H_col = G.T @ B  # (nc, nk): sum_r G[r, c] B[r, k]
    H_row = G @ A  # (nr, nk): sum_c G[r, c] A[c, k]
    AH = A * H_col
    dW = AH.sum(axis=0).imag
    dK = params.W[:, None] * ((AH.T @ col_part).real + ((B * H_row).T @ row_part).real)
    return Gradients(K=dK, W=dW)


def _direct_backward(params, X, dL_drho) -> Gradients:
    dK = np.zeros_like(params.K)
    dW = np.zeros_like(params.W)
    for s in range(0, X.shape[0], CHUNK_ROWS):
        Xc = X[s:s + CHUNK_ROWS]
        Z = Xc @ params.K.T + PHASE
        S = np.sin(Z)
        rho = sigmoid(S @ params.W)
        gc = dL_drho[s:s + CHUNK_ROWS] * rho * (1.0 - rho)
        dW += S.T @ gc
        dK += params.W[:, None] * ((np.cos(Z) * gc[:, None]).T @ Xc)
    return Gradients(K=dK, W=dW)


def backward_many(params: NetworkParams, items, cache: FactorCache | None = None) -> Gradients:
    """Summed gradients for several ``(batch, dL_drho)`` pairs.

    Row gradients of batches on the same lattice are merged first, so each
    distinct lattice is back-propagated once.
    """
    total = Gradients.zeros_like(params)
    lattices: dict[tuple, tuple[CoordinateBatch, np.ndarray]] = {}
    for batch, dL in items:
        _check_batch(params, batch)
        dL = _check_grad(batch, dL)
        if batch.split is None:
            total = total + _direct_backward(params, batch.rows, dL)
            continue
        key = _lattice_key(batch)
        if key not in lattices:
            nr, nc = batch.split[0].shape[0], batch.split[1].shape[0]
            lattices[key] = (batch, np.zeros(nr * nc))
        G = lattices[key][1]
        if batch.subset is None:
            G += dL
        else:
            np.add.at(G, batch.subset, dL)
    for batch, G in lattices.values():
        entry = _lattice_entry(params, batch, cache)
        total = total + _lattice_backward(params, batch, entry, G.reshape(batch.grid_shape))
    return total


def backward(params: NetworkParams, batch: CoordinateBatch, dL_drho,
             cache: FactorCache | None = None) -> Gradients:
    """Gradients of sum_r dL_drho[r] * rho_r with respect to K and W."""
    return backward_many(params, [(batch, dL_drho)], cache)


@dataclass
class AdamState:
    m_K: np.ndarray
    m_W: np.ndarray
    v_K: np.ndarray
    v_W: np.ndarray
    step_count: int = 0
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 0.002, **kw) -> "AdamState":
        z = np.zeros_like
        return cls(z(params.K), z(params.W), z(params.K), z(params.W), lr=lr, **kw)


def adam_step(state: AdamState, params: NetworkParams, grads: Gradients):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if grads.K.shape != params.K.shape or grads.W.shape != params.W.shape:
        raise ValueError("gradient shapes do not match parameters")
    if not (np.all(np.isfinite(grads.K)) and np.all(np.isfinite(grads.W))):
        raise FloatingPointError("non-finite gradient passed to Adam")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new = {}
    out = {}
    for name, p, g in (("K", params.K, grads.K), ("W", params.W, grads.W)):
        m = b1 * getattr(state, "m_" + name) + (1.0 - b1) * g
        v = b2 * getattr(state, "v_" + name) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new["m_" + name], new["v_" + name] = m, v
    return replace(params, K=out["K"], W=out["W"]), replace(state, step_count=t, **new)
