"""Small numerical kernel with explicit forward/backward pairs.

Arrays are plain numpy. Every function keeps the caller's floating dtype for
its outputs while sums run in float64, so a float64 caller gets a fully
64-bit path (used by the gradient checks) and float32 storage still gets
64-bit accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

NORM_EPS = 1e-12


def _float_dtype(*arrays) -> np.dtype:
    return np.result_type(*[np.asarray(a).dtype for a in arrays], np.float32)


# -- dense layers -----------------------------------------------------------

def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[-1]:
        raise ValueError(f"linear: shapes {x.shape} @ {W.shape} + {b.shape} do not match")
    return x @ W + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return ``(dx, dW, db)``."""
    dx = dy @ W.T
    dW = x.T @ dy
    db = dy.sum(axis=0, dtype=np.float64).astype(dW.dtype, copy=False)
    return dx, dW, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0)


def _row_norms(x: np.ndarray, axis: int) -> np.ndarray:
    return np.sqrt(np.sum(np.square(x, dtype=np.float64), axis=axis, keepdims=True))


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale vectors along ``axis`` to unit length; near-zero vectors pass through."""
    n = _row_norms(x, axis)
    safe = n >= NORM_EPS
    return np.where(safe, x / np.where(safe, n, 1.0), x).astype(x.dtype, copy=False)


def l2_normalize_backward(dy: np.ndarray, x: np.ndarray, axis: int = -1) -> np.ndarray:
    n = _row_norms(x, axis)
    safe = n >= NORM_EPS
    ns = np.where(safe, n, 1.0)
    y = x / ns
    proj = np.sum(y * dy, axis=axis, keepdims=True, dtype=np.float64)
    dx = (dy - y * proj) / ns
    return np.where(safe, dx, 0).astype(_float_dtype(x, dy), copy=False)


# -- feature map resampling -------------------------------------------------

def _axis_weights(n_src: int, n_dst: int):
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w = src - i0
    return i0, i1, w


def bilinear_resize(fm, height: int, width: int):
    """Resize an (H, W, C) map (or FeatureMap) channel-wise to ``height`` x ``width``."""
    from .frameio import FeatureMap

    wrap = isinstance(fm, FeatureMap)
    data = np.asarray(fm.data if wrap else fm)
    if height < 1 or width < 1:
        raise ValueError("target size must be >= 1")
    H, W, _ = data.shape
    if (H, W) == (height, width):
        out = data.copy()
    else:
        y0, y1, wy = _axis_weights(H, height)
        x0, x1, wx = _axis_weights(W, width)
        d = data.astype(np.float64)
        top = d[y0] * (1 - wy)[:, None, None] + d[y1] * wy[:, None, None]
        out = top[:, x0] * (1 - wx)[None, :, None] + top[:, x1] * wx[None, :, None]
        out = out.astype(data.dtype)
    return FeatureMap(out) if wrap else out


# -- grid routing -----------------------------------------------------------

@dataclass(eq=False)
class CellRouting:
    """Point-to-cell assignment with cached sparse operators.

    ``scatter`` averages point rows into cells (empty cells stay zero) and
    ``gather`` copies each cell row back to its points.
    """

    cell_ids: np.ndarray
    n_cells: int
    counts: np.ndarray = field(init=False)
    _mean_op: sp.csr_matrix = field(init=False, repr=False)
    _sum_op: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.cell_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_cells):
            raise ValueError(f"cell ids must lie in [0, {self.n_cells})")
        self.cell_ids = ids
        n = ids.size
        self.counts = np.bincount(ids, minlength=self.n_cells).astype(np.int64)
        cols = np.arange(n)
        self._sum_op = sp.csr_matrix((np.ones(n), (ids, cols)), shape=(self.n_cells, n))
        inv = 1.0 / np.maximum(self.counts, 1)
        self._mean_op = sp.csr_matrix((inv[ids], (ids, cols)), shape=(self.n_cells, n))

    def scatter_mean(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self._mean_op @ x.astype(np.float64, copy=False)).astype(x.dtype, copy=False)

    def scatter_mean_backward(self, dgrid: np.ndarray) -> np.ndarray:
        return np.asarray(self._mean_op.T @ dgrid.astype(np.float64, copy=False)).astype(
            dgrid.dtype, copy=False)

    def gather(self, grid: np.ndarray) -> np.ndarray:
        return grid[self.cell_ids]

    def gather_backward(self, dx: np.ndarray) -> np.ndarray:
        return np.asarray(self._sum_op @ dx.astype(np.float64, copy=False)).astype(dx.dtype, copy=False)


def grid_scatter_mean(point_feats: np.ndarray, cell_ids: np.ndarray, n_cells: int) -> np.ndarray:
    return CellRouting(cell_ids, n_cells).scatter_mean(point_feats)


def grid_scatter_mean_backward(dgrid: np.ndarray, cell_ids: np.ndarray, n_cells: int) -> np.ndarray:
    return CellRouting(cell_ids, n_cells).scatter_mean_backward(dgrid)


def grid_gather(grid_feats: np.ndarray, cell_ids: np.ndarray) -> np.ndarray:
    return CellRouting(cell_ids, grid_feats.shape[0]).gather(grid_feats)


def grid_gather_backward(dpoint: np.ndarray, cell_ids: np.ndarray, n_cells: int) -> np.ndarray:
    return CellRouting(cell_ids, n_cells).gather_backward(dpoint)


# -- losses -----------------------------------------------------------------

def distill_loss(student: np.ndarray, teacher: np.ndarray, tol: float = 1e-4):
    """Mean Euclidean distance between matching rows of two unit-normalized sets.

    Returns ``(loss, d_loss/d_student)``; rows at zero distance get zero gradient.
    """
    if student.shape != teacher.shape or student.ndim != 2:
        raise ValueError(f"distill_loss: shapes {student.shape} and {teacher.shape} differ")
    n = student.shape[0]
    if n == 0:
        raise ValueError("distill_loss: no rows")
    for name, arr in (("student", student), ("teacher", teacher)):
        norms = _row_norms(arr, 1)
        if np.max(np.abs(norms - 1.0)) > tol:
            raise ValueError(f"distill_loss: {name} rows are not l2-normalized")
    diff = student.astype(np.float64) - teacher.astype(np.float64)
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    loss = float(np.sum(dist) / n)
    nz = dist > 0
    grad = np.zeros_like(diff)
    grad[nz] = diff[nz] / (dist[nz, None] * n)
    return loss, grad.astype(_float_dtype(student), copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_id: int = 65535):
    """Softmax cross-entropy averaged over non-ignored rows; ``(loss, d_logits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    keep = labels != ignore_id
    if np.any(labels[keep] >= k) or np.any(labels[keep] < 0):
        raise ValueError(f"cross_entropy: labels must be < {k} or the ignore id")
    grad = np.zeros(logits.shape, dtype=np.float64)
    m = int(keep.sum())
    if m == 0:
        return 0.0, grad.astype(_float_dtype(logits), copy=False)
    z = logits[keep].astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=1))
    rows = np.arange(m)
    y = labels[keep]
    loss = float(np.sum(logsum - z[rows, y]) / m)
    p = np.exp(z - logsum[:, None])
    p[rows, y] -= 1.0
    grad[keep] = p / m
    return loss, grad.astype(_float_dtype(logits), copy=False)


# -- optimizer --------------------------------------------------------------

@dataclass
class OptState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState,
               lr_scale: dict[str, float] | None = None) -> tuple[dict[str, np.ndarray], OptState]:
    """One AdamW update of every parameter that has a gradient, in place.

    Weight decay is decoupled: ``p -= lr * wd * p`` happens before, and
    separately from, the bias-corrected adaptive step.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient for {name} has shape {g.shape}, expected {p.shape}")
        lr = state.lr * (1.0 if lr_scale is None else lr_scale.get(name, 1.0))
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g64
        v = state.beta2 * v + (1.0 - state.beta2) * g64 * g64
        state.m[name], state.v[name] = m, v
        p64 = p.astype(np.float64)
        p64 = p64 - lr * state.weight_decay * p64
        p64 = p64 - (lr / bc1) * m / (np.sqrt(v) / np.sqrt(bc2) + state.eps)
        params[name] = p64.astype(p.dtype)
    return params, state
