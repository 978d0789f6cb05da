"""Plane-mixing point backbone with a distillation head and a classification head.

Each point is embedded from (x, y, z, intensity). A stack of residual layers
then mixes information between nearby points: layer ``l`` flattens the frame
onto one of the XY, XZ, YZ planes (cycling), averages point features per grid
cell, runs a small per-cell MLP, and adds the cell result back to every point
in that cell.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tensorgrad import (
    CellRouting,
    OptState,
    l2_normalize,
    l2_normalize_backward,
    linear,
    linear_backward,
    relu,
    relu_backward,
)

PLANES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


@dataclass(frozen=True)
class StudentConfig:
    embed_dim: int = 32
    depth: int = 4
    grid_cells: int = 64
    cell_size: float = 0.15
    teacher_dim: int = 8
    n_classes: int = 4
    centered_inputs: bool = False

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.grid_cells < 2:
            raise ValueError("grid_cells must be >= 2")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if min(self.embed_dim, self.teacher_dim, self.n_classes) < 1:
            raise ValueError("embed_dim, teacher_dim and n_classes must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_run_config(cls, run) -> "StudentConfig":
        s = run.student
        return cls(embed_dim=s.embed_dim, depth=s.depth, grid_cells=s.grid_cells,
                   cell_size=s.cell_size_m, teacher_dim=run.teacher_dim,
                   n_classes=run.classes, centered_inputs=s.centered_inputs)


def param_shapes(cfg: StudentConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    E = cfg.embed_dim
    shapes = [("embed.W", (4, E)), ("embed.b", (E,))]
    for layer in range(cfg.depth):
        shapes += [(f"mix{layer}.W1", (E, E)), (f"mix{layer}.b1", (E,)),
                   (f"mix{layer}.W2", (E, E)), (f"mix{layer}.b2", (E,))]
    shapes += [("distill.W", (E, cfg.teacher_dim)), ("distill.b", (cfg.teacher_dim,)),
               ("classifier.W", (E, cfg.n_classes)), ("classifier.b", (cfg.n_classes,))]
    return shapes


def init_params(cfg: StudentConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def layer_index(name: str, depth: int) -> int:
    """Position of a parameter in the input-to-output layer order.

    Embedding is layer 0, mixing layer ``l`` is ``l + 1`` and both heads sit at
    ``depth + 1``.
    """
    if name.startswith("embed."):
        return 0
    if name.startswith("mix"):
        return int(name[3:name.index(".")]) + 1
    return depth + 1


def backbone_names(cfg: StudentConfig) -> list[str]:
    return [n for n, _ in param_shapes(cfg) if n.startswith(("embed.", "mix"))]


# -- forward / backward -----------------------------------------------------

@dataclass(eq=False)
class FrameRouting:
    """Per-plane cell routings for one frame; layer ``l`` uses ``planes[l % 3]``."""

    inputs: np.ndarray  # (N, 4) float64 network input
    planes: tuple[CellRouting, CellRouting, CellRouting]


def build_routing(cfg: StudentConfig, points: np.ndarray) -> FrameRouting:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4 or pts.shape[0] < 1:
        raise ValueError("student input must be a non-empty (N, 4) array")
    xyz = pts[:, :3]
    centroid = xyz.mean(axis=0)
    origin = centroid - 0.5 * cfg.grid_cells * cfg.cell_size
    cell = np.floor((xyz - origin) / cfg.cell_size)
    cell = np.clip(cell, 0, cfg.grid_cells - 1).astype(np.int64)
    routings = []
    for a, b in PLANES:
        flat = cell[:, a] * cfg.grid_cells + cell[:, b]
        # only occupied cells are materialized; empty cells never reach a point
        _, inv = np.unique(flat, return_inverse=True)
        inv = inv.reshape(-1)
        routings.append(CellRouting(inv, int(inv.max()) + 1))
    inputs = pts.copy()
    if cfg.centered_inputs:
        inputs[:, :3] -= centroid
    return FrameRouting(inputs, tuple(routings))


@dataclass(eq=False)
class ForwardCache:
    routing: FrameRouting
    layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (cell mean, pre-relu, post-relu)


def forward(params: dict[str, np.ndarray], cfg: StudentConfig, frame,
            routing: FrameRouting | None = None):
    """Backbone features for every point of ``frame`` (a LidarFrame or (N, 4) array).

    Returns ``(features (N, embed_dim) float64, cache)``.
    """
    if routing is None:
        points = frame.points if hasattr(frame, "points") else frame
        routing = build_routing(cfg, points)
    h = linear(routing.inputs, params["embed.W"], params["embed.b"]).astype(np.float64)
    layers = []
    for layer in range(cfg.depth):
        r = routing.planes[layer % 3]
        g = r.scatter_mean(h)
        a = linear(g, params[f"mix{layer}.W1"], params[f"mix{layer}.b1"])
        z = relu(a)
        m = linear(z, params[f"mix{layer}.W2"], params[f"mix{layer}.b2"])
        h = h + r.gather(m)
        layers.append((g, a, z))
    return h, ForwardCache(routing, layers)


def backward(params: dict[str, np.ndarray], cfg: StudentConfig, cache: ForwardCache,
             dfeats: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the backbone parameters given ``d loss / d features``."""
    grads: dict[str, np.ndarray] = {}
    dh = np.asarray(dfeats, dtype=np.float64)
    routing = cache.routing
    for layer in reversed(range(cfg.depth)):
        r = routing.planes[layer % 3]
        g, a, z = cache.layers[layer]
        dm = r.gather_backward(dh)
        dz, grads[f"mix{layer}.W2"], grads[f"mix{layer}.b2"] = linear_backward(
            dm, z, params[f"mix{layer}.W2"])
        da = relu_backward(dz, a)
        dg, grads[f"mix{layer}.W1"], grads[f"mix{layer}.b1"] = linear_backward(
            da, g, params[f"mix{layer}.W1"])
        dh = dh + r.scatter_mean_backward(dg)
    _, grads["embed.W"], grads["embed.b"] = linear_backward(dh, routing.inputs, params["embed.W"])
    return grads


def distill_head(params: dict[str, np.ndarray], feats: np.ndarray):
    """Row-normalized teacher-space projection; returns ``(out, pre-normalization)``."""
    pre = linear(feats, params["distill.W"], params["distill.b"])
    return l2_normalize(pre, axis=1), pre


def distill_head_backward(params, feats, pre, dout):
    dpre = l2_normalize_backward(dout, pre, axis=1)
    dfeats, dW, db = linear_backward(dpre, feats, params["distill.W"])
    return dfeats, {"distill.W": dW, "distill.b": db}


def classify_head(params: dict[str, np.ndarray], feats: np.ndarray) -> np.ndarray:
    return linear(feats, params["classifier.W"], params["classifier.b"])


def classify_head_backward(params, feats, dlogits):
    dfeats, dW, db = linear_backward(dlogits, feats, params["classifier.W"])
    return dfeats, {"classifier.W": dW, "classifier.b": db}


def add_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for k, v in part.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v


# -- checkpoints ------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    config: StudentConfig
    params: dict[str, np.ndarray]
    opt_state: OptState | None = None

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def check_config(self, cfg: StudentConfig) -> None:
        if cfg.fingerprint() != self.fingerprint:
            raise ValidationError(
                f"checkpoint config fingerprint {self.fingerprint[:12]} does not match "
                f"run config {cfg.fingerprint()[:12]}")


CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_str(out: io.BytesIO, s: str) -> None:
    b = s.encode()
    out.write(struct.pack("<H", len(b)))
    out.write(b)


def _write_tensor(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    _write_str(out, name)
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"tensor {name} has unsupported dtype {arr.dtype}")
    out.write(struct.pack("<BB", code, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(arr.astype(_DTYPES[code], copy=False).tobytes())


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode()

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{self.source}: unknown dtype code {code}")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, data.astype(dt.newbyteorder("="))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    flags = 1 if ckpt.opt_state is not None else 0
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<HH", CKPT_VERSION, flags))
    out.write(bytes.fromhex(ckpt.fingerprint))
    cfg_json = ckpt.config.to_json().encode()
    out.write(struct.pack("<I", len(cfg_json)))
    out.write(cfg_json)
    names = [n for n, _ in param_shapes(ckpt.config)]
    out.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(out, name, ckpt.params[name])
    if ckpt.opt_state is not None:
        st = ckpt.opt_state
        out.write(struct.pack("<Q5d", st.step, st.lr, st.weight_decay, st.beta1, st.beta2, st.eps))
        moment_names = [n for n in names if n in st.m]
        out.write(struct.pack("<I", len(moment_names)))
        for name in moment_names:
            _write_tensor(out, name, st.m[name])
            _write_tensor(out, name, st.v[name])
    return out.getvalue()


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    rd = _Reader(buf, source)
    if rd.take(4) != CKPT_MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    version, flags = rd.unpack("<HH")
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    fingerprint = rd.take(32).hex()
    (n,) = rd.unpack("<I")
    try:
        cfg = StudentConfig(**json.loads(rd.take(n).decode()))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{source}: bad embedded config: {exc}") from exc
    if cfg.fingerprint() != fingerprint:
        raise FormatError(f"{source}: config fingerprint does not match embedded config")
    (count,) = rd.unpack("<I")
    params = {}
    for _ in range(count):
        name, arr = rd.tensor()
        params[name] = arr
    expected = param_shapes(cfg)
    if [n for n, _ in expected] != list(params) or any(
            params[n].shape != s for n, s in expected):
        raise FormatError(f"{source}: parameter tensors do not match the embedded config")
    opt = None
    if flags & 1:
        step, lr, wd, b1, b2, eps = rd.unpack("<Q5d")
        opt = OptState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps, step=step)
        (k,) = rd.unpack("<I")
        for _ in range(k):
            name, m = rd.tensor()
            _, v = rd.tensor()
            opt.m[name], opt.v[name] = m, v
    if rd.pos != len(buf):
        raise FormatError(f"{source}: trailing bytes after checkpoint")
    return Checkpoint(cfg, params, opt)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
