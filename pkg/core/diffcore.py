"""
Dense float64 tensors with a recorded graph and reverse-mode gradients.

A Graph owns every tensor that flows through a forward pass. Primitives are
Function subclasses: forward works on plain numpy arrays, backward maps the
output gradient to one gradient per input. Applying a primitive to tensors
that belong to a graph appends an OpRecord, so the graph can later be
replayed or differentiated once.

Every primitive accepts an optional leading batch axis; spatial primitives
work on the trailing (C, H, W) axes.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Type, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, InputError, NumericError, UsageError
from .logging import LOGGER

logger = LOGGER(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Immutable float64 value, optionally tracked by a Graph"""

    __slots__ = ('data', 'requires_grad', 'grad', 'graph', 'id', 'name')
    # ndarray <op> Tensor must defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.graph: Optional['Graph'] = None
        self.id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, id={self.id})"

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Function:
    """Base primitive: subclasses implement forward/backward on numpy arrays"""

    name = 'function'

    def __init__(self, **attrs):
        self.attrs = attrs
        for key, value in attrs.items():
            setattr(self, key, value)
        self.saved: Dict[str, Any] = {}

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, needs: Tuple[bool, ...]) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def release(self):
        self.saved = {}


@dataclass
class OpRecord:
    op: Type[Function]
    attrs: Dict[str, Any]
    inputs: Tuple[int, ...]
    output: int
    function: Optional[Function] = field(default=None, repr=False)


class Graph:
    """Ordered record of primitive applications for one forward pass"""

    def __init__(self):
        self.records: List[OpRecord] = []
        self.tensors: Dict[int, Tensor] = {}
        self._consumed = False

    def _register(self, tensor: Tensor) -> Tensor:
        if tensor.graph is None:
            tensor.graph = self
            tensor.id = len(self.tensors)
            self.tensors[tensor.id] = tensor
        elif tensor.graph is not self:
            raise UsageError("tensor belongs to another graph")
        return tensor

    def leaf(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
        """Create an input tensor owned by this graph"""
        return self._register(Tensor(data, requires_grad=requires_grad, name=name))

    def leaves(self) -> List[Tensor]:
        produced = {record.output for record in self.records}
        return [t for tid, t in self.tensors.items() if tid not in produced]

    def record(self, function: Function, inputs: Sequence[Tensor], output: Tensor):
        for tensor in inputs:
            self._register(tensor)
        self._register(output)
        self.records.append(OpRecord(type(function), function.attrs, tuple(t.id for t in inputs), output.id, function))

    @property
    def consumed(self) -> bool:
        return self._consumed

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Populate .grad on every requires_grad leaf reachable from loss"""
        if self._consumed:
            raise UsageError("graph already differentiated; run the forward pass again")
        if loss.graph is not self:
            raise UsageError("loss is not a node of this graph")
        if loss.data.ndim != 0:
            raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float64)}
        produced = set()
        for record in reversed(self.records):
            produced.add(record.output)
            grad = grads.pop(record.output, None)
            if grad is None:
                continue
            inputs = [self.tensors[i] for i in record.inputs]
            needs = tuple(t.requires_grad for t in inputs)
            if not any(needs):
                continue
            input_grads = record.function.backward(grad, needs)
            for tensor, input_grad, need in zip(inputs, input_grads, needs):
                if not need or input_grad is None:
                    continue
                if tensor.id in grads:
                    grads[tensor.id] = grads[tensor.id] + input_grad
                else:
                    grads[tensor.id] = input_grad

        for record in self.records:
            if record.function is not None:
                record.function.release()
        self._consumed = True

        leaf_grads = {}
        for tid, grad in grads.items():
            tensor = self.tensors[tid]
            if tid in produced or not tensor.requires_grad:
                continue
            _check_finite(grad, 'backward')
            tensor.grad = grad
            leaf_grads[tid] = grad
        for tensor in self.leaves():
            if tensor.requires_grad and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
        return leaf_grads

    def replay(self, overrides: Optional[Mapping[int, np.ndarray]] = None) -> Dict[int, np.ndarray]:
        """Re-run every recorded primitive in order from the leaf values"""
        overrides = overrides or {}
        values: Dict[int, np.ndarray] = {}
        for tensor in self.leaves():
            values[tensor.id] = np.asarray(overrides.get(tensor.id, tensor.data), dtype=np.float64)
        for record in self.records:
            function = record.op(**record.attrs)
            values[record.output] = function.forward(*[values[i] for i in record.inputs])
        return values


def backward(graph: Graph, loss: Tensor) -> Dict[int, np.ndarray]:
    return graph.backward(loss)


def _check_finite(array: np.ndarray, op: str):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values produced by {op}")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def apply(function: Function, *inputs) -> Tensor:
    """Run a primitive forward and record it on the inputs' graph"""
    tensors = [_as_tensor(t) for t in inputs]
    graphs = {id(t.graph): t.graph for t in tensors if t.graph is not None}
    if len(graphs) > 1:
        raise UsageError(f"{function.name}: inputs come from different graphs")
    out_data = function.forward(*[t.data for t in tensors])
    _check_finite(out_data, function.name)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    if graphs:
        graph = next(iter(graphs.values()))
        graph.record(function, tensors, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

class Add(Function):
    name = 'add'

    def forward(self, a, b):
        self.saved = {'shapes': (a.shape, b.shape)}
        return a + b

    def backward(self, grad, needs):
        sa, sb = self.saved['shapes']
        return (_unbroadcast(grad, sa) if needs[0] else None,
                _unbroadcast(grad, sb) if needs[1] else None)


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        self.saved = {'shapes': (a.shape, b.shape)}
        return a - b

    def backward(self, grad, needs):
        sa, sb = self.saved['shapes']
        return (_unbroadcast(grad, sa) if needs[0] else None,
                _unbroadcast(-grad, sb) if needs[1] else None)


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        self.saved = {'a': a, 'b': b}
        return a * b

    def backward(self, grad, needs):
        a, b = self.saved['a'], self.saved['b']
        return (_unbroadcast(grad * b, a.shape) if needs[0] else None,
                _unbroadcast(grad * a, b.shape) if needs[1] else None)


class Div(Function):
    name = 'div'

    def forward(self, a, b):
        self.saved = {'a': a, 'b': b}
        return a / b

    def backward(self, grad, needs):
        a, b = self.saved['a'], self.saved['b']
        return (_unbroadcast(grad / b, a.shape) if needs[0] else None,
                _unbroadcast(-grad * a / (b * b), b.shape) if needs[1] else None)


class Sqrt(Function):
    name = 'sqrt'

    def forward(self, a):
        if np.any(a < 0):
            raise NumericError("sqrt of a negative value")
        out = np.sqrt(a)
        self.saved = {'out': out}
        return out

    def backward(self, grad, needs):
        return (grad / (2.0 * self.saved['out']),)


class ReLU(Function):
    name = 'relu'

    def forward(self, a):
        mask = a > 0
        self.saved = {'mask': mask}
        return np.where(mask, a, 0.0)

    def backward(self, grad, needs):
        return (grad * self.saved['mask'],)


class Sigmoid(Function):
    name = 'sigmoid'

    def forward(self, a):
        # stable in both tails
        e = np.exp(-np.abs(a))
        out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        self.saved = {'out': out}
        return out

    def backward(self, grad, needs):
        out = self.saved['out']
        return (grad * out * (1.0 - out),)


def add(a, b) -> Tensor: return apply(Add(), a, b)
def sub(a, b) -> Tensor: return apply(Sub(), a, b)
def mul(a, b) -> Tensor: return apply(Mul(), a, b)
def div(a, b) -> Tensor: return apply(Div(), a, b)
def sqrt(a) -> Tensor: return apply(Sqrt(), a)
def relu(a) -> Tensor: return apply(ReLU(), a)
def sigmoid(a) -> Tensor: return apply(Sigmoid(), a)


# ---------------------------------------------------------------------------
# Reductions and movement
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    name = 'sum'

    def forward(self, a):
        axes = _normalize_axes(self.axis, a.ndim)
        self.saved = {'shape': a.shape, 'axes': axes}
        return np.sum(a, axis=axes, keepdims=self.keepdims)

    def backward(self, grad, needs):
        shape, axes = self.saved['shape'], self.saved['axes']
        if not self.keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    name = 'mean'

    def forward(self, a):
        axes = _normalize_axes(self.axis, a.ndim)
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        self.saved = {'shape': a.shape, 'axes': axes, 'count': count}
        return np.mean(a, axis=axes, keepdims=self.keepdims)

    def backward(self, grad, needs):
        shape, axes, count = self.saved['shape'], self.saved['axes'], self.saved['count']
        if not self.keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad / count, shape).copy(),)


class Reshape(Function):
    name = 'reshape'

    def forward(self, a):
        self.saved = {'shape': a.shape}
        return a.reshape(self.shape)

    def backward(self, grad, needs):
        return (grad.reshape(self.saved['shape']),)


class Take(Function):
    """Select indices along one axis"""

    name = 'take'

    def forward(self, a):
        self.saved = {'shape': a.shape}
        return np.take(a, self.indices, axis=self.axis)

    def backward(self, grad, needs):
        out = np.zeros(self.saved['shape'])
        axis = self.axis % len(self.saved['shape'])
        index = [slice(None)] * out.ndim
        index[axis] = list(self.indices)
        np.add.at(out, tuple(index), grad)
        return (out,)


class Concat(Function):
    name = 'concat'

    def forward(self, *arrays):
        self.saved = {'sizes': [a.shape[self.axis] for a in arrays]}
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad, needs):
        bounds = np.cumsum(self.saved['sizes'])[:-1]
        parts = np.split(grad, bounds, axis=self.axis)
        return tuple(p if n else None for p, n in zip(parts, needs))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply(Sum(axis=axis, keepdims=keepdims), a)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return apply(Mean(axis=axis, keepdims=keepdims), a)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return apply(Reshape(shape=tuple(shape)), a)


def take(a, indices: Sequence[int], axis: int) -> Tensor:
    return apply(Take(indices=tuple(int(i) for i in indices), axis=axis), a)


def concat(tensors: Sequence, axis: int) -> Tensor:
    return apply(Concat(axis=axis), *tensors)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear(Function):
    """y = x W^T + b over the last axis"""

    name = 'linear'

    def forward(self, x, weight, bias):
        if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise ConfigurationError(
                f"linear: input {x.shape} incompatible with weight {weight.shape} / bias {bias.shape}")
        self.saved = {'x': x, 'weight': weight}
        return x @ weight.T + bias

    def backward(self, grad, needs):
        x, weight = self.saved['x'], self.saved['weight']
        gx = grad @ weight if needs[0] else None
        gw = gb = None
        if needs[1]:
            gw = grad.reshape(-1, grad.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        if needs[2]:
            gb = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
        return gx, gw, gb


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a convolution, rejecting configurations that drop real input"""
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1:
        raise ConfigurationError(f"conv2d: kernel {kernel} does not fit extent {size} with padding {padding}")
    if span % stride > padding:
        raise ConfigurationError(
            f"conv2d: extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"would drop {span % stride} trailing input rows")
    return span // stride + 1


class Conv2d(Function):
    """Cross-correlation over (C, H, W) with an optional batch axis"""

    name = 'conv2d'

    def forward(self, x, kernel, bias):
        batched = x.ndim == 4
        if not batched:
            x = x[None]
        if x.ndim != 4 or kernel.ndim != 4:
            raise ConfigurationError(f"conv2d: expected C×H×W input and O×C×k×k kernel, got {x.shape}, {kernel.shape}")
        n, c, h, w = x.shape
        o, kc, kh, kw = kernel.shape
        if kc != c or kh != kw or kh % 2 == 0:
            raise ConfigurationError(f"conv2d: kernel {kernel.shape} incompatible with input channels {c}")
        if bias.shape != (o,):
            raise ConfigurationError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        if self.padding < 0:
            raise ConfigurationError("conv2d: padding must be non-negative")
        k, s, p = kh, self.stride, self.padding
        out_h = conv_output_extent(h, k, s, p)
        out_w = conv_output_extent(w, k, s, p)

        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
        # (n, out_h, out_w, c*k*k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h, out_w, c * k * k)
        out = cols @ kernel.reshape(o, -1).T + bias
        out = out.transpose(0, 3, 1, 2)
        self.saved = {'cols': cols, 'kernel': kernel, 'x_shape': x.shape, 'batched': batched}
        return out if batched else out[0]

    def backward(self, grad, needs):
        cols, kernel = self.saved['cols'], self.saved['kernel']
        n, c, h, w = self.saved['x_shape']
        batched = self.saved['batched']
        if not batched:
            grad = grad[None]
        o, _, k, _ = kernel.shape
        s, p = self.stride, self.padding
        out_h, out_w = grad.shape[2], grad.shape[3]
        g = grad.transpose(0, 2, 3, 1)  # n, out_h, out_w, o

        gx = gk = gb = None
        if needs[1]:
            gk = (g.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(kernel.shape)
        if needs[2]:
            gb = g.reshape(-1, o).sum(axis=0)
        if needs[0]:
            dcols = (g @ kernel.reshape(o, -1)).reshape(n, out_h, out_w, c, k, k)
            padded = np.zeros((n, c, h + 2 * p, w + 2 * p))
            for i in range(k):
                for j in range(k):
                    padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = padded[:, :, p:p + h, p:p + w]
            if not batched:
                gx = gx[0]
        return gx, gk, gb


class SoftmaxChannels(Function):
    """Softmax over the channel axis (third from last)"""

    name = 'softmax_channels'

    def forward(self, logits):
        if logits.ndim < 3 or logits.shape[-3] < 2:
            raise ConfigurationError(f"softmax_channels needs C ≥ 2 channels, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise NumericError("softmax_channels: non-finite input")
        shifted = logits - logits.max(axis=-3, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-3, keepdims=True)
        self.saved = {'out': out}
        return out

    def backward(self, grad, needs):
        out = self.saved['out']
        return (out * (grad - (grad * out).sum(axis=-3, keepdims=True)),)


def pooling_matrix(size: int, out: int) -> np.ndarray:
    """Row i averages input indices [floor(i*size/out), ceil((i+1)*size/out))"""
    matrix = np.zeros((out, size))
    for i in range(out):
        start = (i * size) // out
        stop = -((-(i + 1) * size) // out)
        matrix[i, start:stop] = 1.0 / (stop - start)
    return matrix


class AdaptiveAvgPool(Function):
    name = 'adaptive_avg_pool'

    def forward(self, a):
        h, w = a.shape[-2], a.shape[-1]
        if not (1 <= self.out_h <= h and 1 <= self.out_w <= w):
            raise ConfigurationError(f"adaptive_avg_pool: output {self.out_h}×{self.out_w} exceeds input {h}×{w}")
        ph, pw = pooling_matrix(h, self.out_h), pooling_matrix(w, self.out_w)
        self.saved = {'ph': ph, 'pw': pw}
        return ph @ a @ pw.T

    def backward(self, grad, needs):
        ph, pw = self.saved['ph'], self.saved['pw']
        return (ph.T @ grad @ pw,)


class UpsampleNearest2x(Function):
    name = 'upsample_nearest2x'

    def forward(self, a):
        return a.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, grad, needs):
        shape = grad.shape[:-2] + (grad.shape[-2] // 2, 2, grad.shape[-1] // 2, 2)
        return (grad.reshape(shape).sum(axis=(-3, -1)),)


def linear(x, weight, bias) -> Tensor:
    return apply(Linear(), x, weight, bias)


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    return apply(Conv2d(stride=int(stride), padding=int(padding)), x, kernel, bias)


def softmax_channels(logits) -> Tensor:
    return apply(SoftmaxChannels(), logits)


def adaptive_avg_pool(a, out_h: int, out_w: int) -> Tensor:
    return apply(AdaptiveAvgPool(out_h=int(out_h), out_w=int(out_w)), a)


def upsample_nearest2x(a) -> Tensor:
    return apply(UpsampleNearest2x(), a)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class CrossEntropy(Function):
    """Per-position -log softmax(logits)[target] along `axis`"""

    name = 'cross_entropy'

    def forward(self, logits):
        target = self.target
        axis = self.axis % logits.ndim
        n_classes = logits.shape[axis]
        expected = logits.shape[:axis] + logits.shape[axis + 1:]
        if target.shape != expected:
            raise InputError(f"cross_entropy: target shape {target.shape} does not match {expected}")
        if target.size and (target.min() < 0 or target.max() >= n_classes):
            raise InputError(f"cross_entropy: target outside [0, {n_classes})")
        log_p = _log_softmax(logits, axis)
        picked = np.take_along_axis(log_p, np.expand_dims(target, axis), axis=axis)
        self.saved = {'log_p': log_p, 'axis': axis}
        return -np.squeeze(picked, axis=axis)

    def backward(self, grad, needs):
        log_p, axis = self.saved['log_p'], self.saved['axis']
        g = np.exp(log_p)
        one_hot = np.zeros_like(g)
        np.put_along_axis(one_hot, np.expand_dims(self.target, axis), 1.0, axis=axis)
        return ((g - one_hot) * np.expand_dims(grad, axis),)


class KLDivergence(Function):
    """Per-row D_KL(softmax(p) || softmax(q)) along `axis`"""

    name = 'kl_divergence'

    def forward(self, p_logits, q_logits):
        if p_logits.shape != q_logits.shape:
            raise ConfigurationError(f"kl_divergence: shapes differ {p_logits.shape} vs {q_logits.shape}")
        if not (np.all(np.isfinite(p_logits)) and np.all(np.isfinite(q_logits))):
            raise NumericError("kl_divergence: non-finite input")
        axis = self.axis % p_logits.ndim
        log_p = _log_softmax(p_logits, axis)
        log_q = _log_softmax(q_logits, axis)
        p = np.exp(log_p)
        kl = np.sum(p * (log_p - log_q), axis=axis)
        self.saved = {'log_p': log_p, 'log_q': log_q, 'p': p, 'kl': kl, 'axis': axis}
        return kl

    def backward(self, grad, needs):
        s = self.saved
        axis = s['axis']
        g = np.expand_dims(grad, axis)
        gp = gq = None
        if needs[0]:
            gp = g * s['p'] * ((s['log_p'] - s['log_q']) - np.expand_dims(s['kl'], axis))
        if needs[1]:
            gq = g * (np.exp(s['log_q']) - s['p'])
        return gp, gq


def cross_entropy(logits, target, axis: int = -1, reduction: str = 'mean') -> Tensor:
    """Cross-entropy against integer class indices; 'mean', 'sum' or 'none'"""
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        if np.any(target != np.round(target)):
            raise InputError("cross_entropy: targets must be class indices")
        target = target.astype(np.int64)
    losses = apply(CrossEntropy(target=target, axis=axis), logits)
    return _reduce(losses, reduction)


def kl_divergence(p_logits, q_logits, axis: int = -1, reduction: str = 'mean') -> Tensor:
    return _reduce(apply(KLDivergence(axis=axis), p_logits, q_logits), reduction)


def _reduce(losses: Tensor, reduction: str) -> Tensor:
    if reduction == 'none':
        return losses
    if reduction == 'sum':
        return reduce_sum(losses)
    if reduction == 'mean':
        return reduce_mean(losses)
    raise ConfigurationError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             velocity: Mapping[str, np.ndarray], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One SGD step with heavy-ball momentum and L2 decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    if lr < 0:
        raise UsageError(f"sgd_step: learning rate must be non-negative, got {lr}")
    new_params, new_velocity = {}, {}
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if grad.shape != param.shape:
            raise UsageError(f"sgd_step: grad for {name} has shape {grad.shape}, param has {param.shape}")
        v = velocity.get(name)
        v = np.zeros_like(param) if v is None else v
        v = momentum * v + grad + weight_decay * param
        new_velocity[name] = v
        new_params[name] = param - lr * v
    return new_params, new_velocity


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at total_steps"""
    if total_steps < 1:
        raise UsageError(f"cosine_lr: total_steps must be ≥ 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise UsageError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        f_plus = func(x)
        flat[j] = original - eps
        f_minus = func(x)
        flat[j] = original
        out[j] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), the gradient-check metric"""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0
