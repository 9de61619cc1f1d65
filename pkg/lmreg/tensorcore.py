"""
Minimal reverse-mode tensor engine for the landmark matcher.

Tensors wrap numpy arrays and record the op that produced them together
with a closure that pushes an upstream gradient into their parents.
backward() walks the recorded graph in reverse topological order.
Element precision is float32 unless LMREG_PRECISION or precision() says
otherwise; gradient checks run in float64.
"""

import logging
import os
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from lmreg.errors import (
    CheckpointFormatError,
    DomainError,
    GradcheckError,
    GraphError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_precision = _DTYPES.get(os.getenv("LMREG_PRECISION", "float32"), _DTYPES["float32"])
_grad_state = threading.local()


def get_dtype() -> np.dtype:
    return _precision


def set_precision(name: str) -> None:
    global _precision
    if name not in _DTYPES:
        raise DomainError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision = _DTYPES[name]


@contextmanager
def precision(name: str):
    """Temporarily switch the element type of newly created tensors"""
    previous = _precision.name
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """N-dimensional array node in a reverse-mode graph"""

    def __init__(self, data, requires_grad: bool = False, _prev: Tuple["Tensor", ...] = (), _op: str = "",
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._prev = _prev
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}{label}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise ShapeError("division is only defined by constants")
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _prev=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Graph traversal
@dataclass
class Graph:
    """Nodes reachable from a loss, in topological order (parents first)"""

    nodes: List[Tensor]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order: List[Tensor] = []
        state: Dict[int, int] = {id(loss): 1}
        stack = [(loss, iter(loss._prev))]
        while stack:
            node, children = stack[-1]
            child = next(children, None)
            if child is None:
                stack.pop()
                state[id(node)] = 2
                order.append(node)
                continue
            seen = state.get(id(child))
            if seen == 1:
                raise GraphError(f"cycle detected at {child!r}")
            if seen is None:
                state[id(child)] = 1
                stack.append((child, iter(child._prev)))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if not n._prev and n.requires_grad]


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad"""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not connected to any tensor that requires grad")
    graph = Graph.from_loss(loss)
    for node in graph.nodes:
        if node._prev:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return graph


# Elementwise and reductions
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", _backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, unbroadcast(g, a.shape))
        _accumulate(b, unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", _backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, unbroadcast(g * b.data, a.shape))
        _accumulate(b, unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", _backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), "neg", lambda g: _accumulate(a, -g))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out, (a,), "sum", _backward)


def mean(a: Tensor) -> Tensor:
    return mul(tsum(a), 1.0 / max(a.size, 1))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive values")
    return _result(np.log(a.data), (a,), "log", lambda g: _accumulate(a, g / a.data))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return _result(out, (a,), "reshape", lambda g: _accumulate(a, g.reshape(a.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), "relu", lambda g: _accumulate(a, g * mask))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, (a,), "sigmoid", lambda g: _accumulate(a, g * out * (1.0 - out)))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), "abs", lambda g: _accumulate(a, g * sign))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _result(out, tensors, "concat", _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


# Network layers
def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """Cross-correlation over (N, Cin, D, H, W) with a cubic (Cout, Cin, k, k, k) kernel"""
    if stride != 1:
        raise ShapeError("only stride 1 is supported")
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d needs 5D input and weight, got {x.shape} and {weight.shape}")
    n, cin, d, h, w = x.shape
    cout, wcin, k, k1, k2 = weight.shape
    if wcin != cin or not k == k1 == k2:
        raise ShapeError(f"weight {weight.shape} does not fit input channels {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    p = k // 2 if padding is None else padding
    od, oh, ow = d + 2 * p - k + 1, h + 2 * p - k + 1, w + 2 * p - k + 1
    if min(od, oh, ow) <= 0:
        raise ShapeError(f"kernel {k} too large for input {x.shape[2:]}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    offsets = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]
    acc = np.zeros((cout, n, od, oh, ow), dtype=x.data.dtype)
    for i, j, l in offsets:
        window = xp[:, :, i:i + od, j:j + oh, l:l + ow]
        acc += np.tensordot(weight.data[:, :, i, j, l], window, axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3, 4)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]

    def _backward(g):
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            for i, j, l in offsets:
                window = xp[:, :, i:i + od, j:j + oh, l:l + ow]
                gw[:, :, i, j, l] = np.tensordot(g, window, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            _accumulate(weight, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, l in offsets:
                contrib = np.tensordot(g, weight.data[:, :, i, j, l], axes=([1], [0]))
                gxp[:, :, i:i + od, j:j + oh, l:l + ow] += np.moveaxis(contrib, -1, 1)
            _accumulate(x, gxp[:, :, p:p + d, p:p + h, p:p + w])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, "conv3d", _backward)


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over disjoint 2x2x2 windows; ties go to the lowest linear index"""
    if window != 2 or stride != 2:
        raise ShapeError("only 2x2x2 windows with stride 2 are supported")
    if x.ndim != 5 or any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"maxpool3d needs even spatial dims, got {x.shape}")
    n, c, d, h, w = x.shape
    blocks = (
        x.data.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d // 2, h // 2, w // 2, 8)
    )
    argmax = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, argmax, axis=-1)[..., 0]

    def _backward(g):
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, argmax, g[..., None], axis=-1)
        routed = routed.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        _accumulate(x, routed.reshape(x.shape))

    return _result(out, (x,), "maxpool3d", _backward)


@lru_cache(maxsize=64)
def _upsample_matrix(n_in: int, factor: int, dtype_name: str) -> np.ndarray:
    """Linear interpolation weights (n_in * factor, n_in), half-pixel centers"""
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m = m.astype(dtype_name)
    m.flags.writeable = False
    return m


def _along(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, arr, axes=([1], [axis])), 0, axis)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise DomainError(f"upsampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return _result(x.data.copy(), (x,), "upsample", lambda g: _accumulate(x, g))
    mats = [_upsample_matrix(n, int(factor), x.data.dtype.name) for n in x.shape[2:]]
    out = x.data
    for axis, m in zip((2, 3, 4), mats):
        out = _along(out, m, axis)

    def _backward(g):
        for axis, m in zip((2, 3, 4), mats):
            g = _along(g, m.T, axis)
        _accumulate(x, g)

    return _result(out, (x,), "upsample", _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (K, Fin) @ weight.T (Fin, Fout) + bias"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, "linear", _backward)


def bce(pred: Tensor, target, pos_weight: float = 1.0, neg_weight: float = 1.0,
        reduction: str = "mean") -> Tensor:
    """Weighted binary cross entropy; predictions are clamped away from 0 and 1"""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce: target {t.shape} does not match prediction {pred.shape}")
    if np.any((t != 0) & (t != 1)):
        raise DomainError("bce targets must be 0 or 1")
    if np.any(~(pred.data >= 0) | ~(pred.data <= 1)):
        raise DomainError("bce predictions must lie in [0, 1]")
    if reduction not in ("mean", "sum"):
        raise DomainError(f"unknown reduction {reduction!r}")
    eps = 1e-7 if pred.data.dtype == np.float32 else 1e-12
    p = np.clip(pred.data, eps, 1.0 - eps)
    losses = -(pos_weight * t * np.log(p) + neg_weight * (1.0 - t) * np.log1p(-p))
    scale = 1.0 / max(t.size, 1) if reduction == "mean" else 1.0
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def _backward(g):
        dp = -(pos_weight * t / p - neg_weight * (1.0 - t) / (1.0 - p)) * scale
        _accumulate(pred, g * dp * inside)

    return _result(np.asarray(losses.sum() * scale), (pred,), "bce", _backward)


def pairwise_l2sq(a: Tensor, b: Tensor) -> Tensor:
    """(K1, F), (K2, F) -> squared distances (K1, K2)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_l2sq: {a.shape} and {b.shape} do not conform")
    diff = a.data[:, None, :] - b.data[None, :, :]

    def _backward(g):
        weighted = 2.0 * g[..., None] * diff
        _accumulate(a, weighted.sum(axis=1))
        _accumulate(b, -weighted.sum(axis=0))

    return _result((diff ** 2).sum(axis=-1), (a, b), "pairwise_l2sq", _backward)


def pairwise_absdiff(a: Tensor, b: Tensor) -> Tensor:
    """(K1, F), (K2, F) -> |a_i - b_j| of shape (K1, K2, F)"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_absdiff: {a.shape} and {b.shape} do not conform")
    diff = a.data[:, None, :] - b.data[None, :, :]
    sign = np.sign(diff)

    def _backward(g):
        signed = g * sign
        _accumulate(a, signed.sum(axis=1))
        _accumulate(b, -signed.sum(axis=0))

    return _result(np.abs(diff), (a, b), "pairwise_absdiff", _backward)


def gather_voxels(x: Tensor, indices) -> Tensor:
    """Feature vectors (K, C) at voxel indices (K, 3) of a (1, C, D, H, W) map"""
    if x.ndim != 5 or x.shape[0] != 1:
        raise ShapeError(f"gather_voxels needs a single-item 5D map, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp).reshape(-1, 3)
    dims = x.shape[2:]
    if idx.size and (np.any(idx < 0) or np.any(idx >= np.asarray(dims))):
        raise ShapeError("gather_voxels: index outside the feature map")
    c = x.shape[1]
    flat_index = np.ravel_multi_index(tuple(idx.T), dims) if idx.size else np.zeros(0, dtype=np.intp)
    flat = x.data.reshape(c, -1)
    out = flat[:, flat_index].T

    def _backward(g):
        scatter = np.zeros((flat.shape[1], c), dtype=x.data.dtype)
        np.add.at(scatter, flat_index, g)
        _accumulate(x, scatter.T.reshape(x.shape))

    return _result(np.ascontiguousarray(out), (x,), "gather", _backward)


# Initialization and optimization
def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator, name: Optional[str] = None) -> Tensor:
    """Normal draws with std sqrt(2 / fan_in)"""
    if fan_in <= 0:
        raise DomainError(f"fan_in must be positive, got {fan_in}")
    data = rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Optional[Dict[str, Optional[np.ndarray]]], state: AdamState) -> AdamState:
    """
    One Adam update with bias correction, in place.

    Decoupled weight decay shrinks the parameter by lr * wd before the moment
    update; the coupled variant adds wd * param to the gradient instead.
    Missing gradients count as zero.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not state.decoupled and state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ShapeError(f"moment buffer for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.decoupled and state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# Checkpoints
CHECKPOINT_MAGIC = b"LMREGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], params: Dict[str, np.ndarray], config_text: str = "") -> Path:
    """Binary layout: magic, version, config echo, then name/shape/float32 LE values per parameter"""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    config_bytes = config_text.encode("utf-8")
    chunks += [struct.pack("<I", len(config_bytes)), config_bytes, struct.pack("<I", len(params))]
    for name, value in params.items():
        value = np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], str]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not an lmreg checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    config_text = take(config_len).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return params, config_text


# Gradient checking
def numerical_gradient(f: Callable[[], float], t: Tensor, indices: Iterable[int], eps: float = 1e-6) -> np.ndarray:
    """Central differences of f() with respect to selected flat entries of t"""
    flat = t.data.reshape(-1)
    out = []
    for i in indices:
        saved = flat[i]
        flat[i] = saved + eps
        plus = f()
        flat[i] = saved - eps
        minus = f()
        flat[i] = saved
        out.append((plus - minus) / (2.0 * eps))
    return np.asarray(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradcheck(build: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
              max_entries: int = 200, eps: float = 1e-6) -> float:
    """
    Compare backward() against central differences for up to max_entries
    randomly chosen entries across inputs. Returns the max relative error.
    """
    for t in inputs:
        t.zero_grad()
    backward(build())
    sizes = np.array([t.size for t in inputs])
    quota = np.maximum(1, (max_entries * sizes / sizes.sum()).astype(int))
    worst = 0.0

    def value() -> float:
        with no_grad():
            return float(build().data.reshape(-1)[0])

    for t, n in zip(inputs, quota):
        picks = rng.choice(t.size, size=min(int(n), t.size), replace=False)
        analytic = np.zeros(len(picks)) if t.grad is None else t.grad.reshape(-1)[picks]
        worst = max(worst, relative_error(analytic, numerical_gradient(value, t, picks, eps)))
    return worst


def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[], Tensor], List[Tensor]]]:
    def param(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    x5 = param(1, 2, 4, 4, 4)
    w5 = param(3, 2, 3, 3, 3, scale=0.3)
    b5 = param(3)
    pool_in = param(1, 2, 4, 4, 4)
    up_in = param(1, 2, 3, 2, 3)
    up_weights = Tensor(rng.standard_normal((1, 2, 6, 4, 6)))
    lin_x, lin_w, lin_b = param(5, 4), param(3, 4), param(3)
    logits = param(6)
    labels = (rng.random(6) > 0.5).astype(float)
    da, db = param(4, 5), param(3, 5)
    fmap = param(1, 3, 4, 4, 4)
    picks = rng.integers(0, 4, size=(5, 3))
    pos = Tensor(rng.random((2, 3)) + 0.5, requires_grad=True)
    mix = Tensor(rng.standard_normal((2, 3)))

    return {
        "conv3d": (lambda: (conv3d(x5, w5, b5) * conv3d(x5, w5, b5)).sum(), [x5, w5, b5]),
        "relu": (lambda: (relu(x5) * x5).sum(), [x5]),
        "sigmoid": (lambda: sigmoid(logits).sum(), [logits]),
        "maxpool3d": (lambda: (maxpool3d(pool_in) * maxpool3d(pool_in)).sum(), [pool_in]),
        "upsample_trilinear": (lambda: (upsample_trilinear(up_in, 2) * up_weights).sum(), [up_in]),
        "concat_channels": (lambda: (concat_channels(x5, x5 * x5) * concat_channels(x5, x5)).sum(), [x5]),
        "linear": (lambda: (linear(lin_x, lin_w, lin_b) * linear(lin_x, lin_w, lin_b)).sum(), [lin_x, lin_w, lin_b]),
        "bce": (lambda: bce(sigmoid(logits), labels, 2.0, 0.5), [logits]),
        "pairwise_l2sq": (lambda: exp(-pairwise_l2sq(da, db) * 0.1).sum(), [da, db]),
        "pairwise_absdiff": (lambda: (pairwise_absdiff(da, db) * pairwise_absdiff(da, db)).sum(), [da, db]),
        "gather_voxels": (lambda: (gather_voxels(fmap, picks) * gather_voxels(fmap, picks)).sum(), [fmap]),
        "log_exp_mean": (lambda: (log(pos) * exp(mix) + pos).mean(), [pos]),
    }


def run_gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> Dict[str, float]:
    """Finite-difference check of every op in float64; raises GradcheckError on failure"""
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    with precision("float64"):
        for name, (build, inputs) in _op_cases(rng).items():
            errors[name] = gradcheck(build, inputs, rng)
            logger.info("gradcheck %-20s max relative error %.3e", name, errors[name])
    failed = {k: v for k, v in errors.items() if not v < tolerance}
    if failed:
        raise GradcheckError(
            "gradient check failed: " + ", ".join(f"{k}={v:.3e}" for k, v in sorted(failed.items()))
        )
    return errors
