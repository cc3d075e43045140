"""
Differentiable operations on `Tensor`.

Each operation is a `Function` subclass holding its forward and backward rule,
plus a lowercase wrapper that is what the rest of the package calls.
Broadcasting is limited to a trailing-shape operand (bias / mask rows added
over leading axes), which is all the transformer blocks need.
"""
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import ShapeError
from tensor import Function, Tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out leading axes that were broadcast onto a trailing-shape operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_trailing(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


class Add(Function):
    op = "add"

    def forward(self, a, b):
        _check_trailing(self.op, a, b)
        self.b_shape = b.shape
        return a + b

    def backward(self, grad):
        return grad, _unbroadcast(grad, self.b_shape)


class Sub(Function):
    op = "sub"

    def forward(self, a, b):
        _check_trailing(self.op, a, b)
        self.b_shape = b.shape
        return a - b

    def backward(self, grad):
        return grad, -_unbroadcast(grad, self.b_shape)


class Mul(Function):
    op = "mul"

    def forward(self, a, b):
        _check_trailing(self.op, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = grad * self.b if self.needs_grad[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Scale(Function):
    op = "scale"

    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    op = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul: inner extents differ ({a.shape[-1]} vs {b.shape[-2]}) for shapes {a.shape} x {b.shape}"
            )
        if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul: batch extents differ for shapes {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = gb = None
        if self.needs_grad[0]:
            ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
            ga = _unbroadcast(ga, self.a.shape)
        if self.needs_grad[1]:
            gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
            gb = _unbroadcast(gb, self.b.shape)
        return ga, gb


class Permute(Function):
    op = "permute"

    def forward(self, a, axes: Sequence[int]):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    op = "reshape"

    def forward(self, a, shape: Sequence[int]):
        self.in_shape = a.shape
        try:
            return np.reshape(a, tuple(shape))
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc

    def backward(self, grad):
        return (np.reshape(grad, self.in_shape),)


class Gather(Function):
    op = "gather"

    def forward(self, a, index: Sequence[int], axis: int = 0):
        self.index = np.asarray(index, dtype=np.int64)
        if self.index.size == 0:
            raise ShapeError("gather: empty index list")
        self.axis = axis % a.ndim
        self.in_shape = a.shape
        if self.index.min() < 0 or self.index.max() >= a.shape[self.axis]:
            raise ShapeError(f"gather: index out of range for extent {a.shape[self.axis]}")
        return np.take(a, self.index, axis=self.axis)

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        moved = np.moveaxis(out, self.axis, 0)
        np.add.at(moved, self.index, np.moveaxis(grad, self.axis, 0))
        return (out,)


class Concat(Function):
    op = "concat"

    def forward(self, *parts, axis: int = 0):
        ndim = parts[0].ndim
        self.axis = axis % ndim
        for part in parts[1:]:
            if part.ndim != ndim or any(
                part.shape[i] != parts[0].shape[i] for i in range(ndim) if i != self.axis
            ):
                raise ShapeError(f"concat: shapes {[p.shape for p in parts]} disagree off axis {axis}")
        self.sizes = [p.shape[self.axis] for p in parts]
        return np.concatenate(parts, axis=self.axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Sum(Function):
    op = "sum"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    op = "mean"

    def forward(self, a, axis: Optional[int] = None, keepdims: bool = False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Softmax(Function):
    op = "softmax"

    def forward(self, a, axis: int = -1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    op = "layer_norm"

    def forward(self, x, gain, bias, eps: float = 1e-6):
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match width {d}")
        if eps <= 0:
            raise ValueError("layer_norm: eps must be positive")
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat = self.xhat
        dgain = (grad * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        dbias = grad.reshape(-1, xhat.shape[-1]).sum(axis=0)
        dxhat = grad * self.gain
        dx = self.inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias


class Gelu(Function):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""

    op = "gelu"

    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) / math.sqrt(2.0 * math.pi)
        return (grad * (self.cdf + self.x * pdf),)


class SigmoidBCE(Function):
    """Mean binary cross-entropy on logits over every (sample, class) entry."""

    op = "sigmoid_bce"

    def forward(self, logits, targets: np.ndarray):
        targets = np.asarray(targets, dtype=logits.dtype)
        if targets.shape != logits.shape:
            raise ShapeError(f"sigmoid_bce: targets {targets.shape} vs logits {logits.shape}")
        self.targets = targets
        self.prob = 0.5 * (1.0 + np.tanh(0.5 * logits))
        # log(1 + exp(-|z|)) + max(z, 0) - z*y
        loss = np.logaddexp(0.0, -np.abs(logits)) + np.maximum(logits, 0.0) - logits * targets
        return np.mean(loss)

    def backward(self, grad):
        return (grad * (self.prob - self.targets) / self.prob.size,)


class SmoothedCrossEntropy(Function):
    """Label-smoothed softmax cross-entropy averaged over samples."""

    op = "smoothed_cross_entropy"

    def forward(self, logits, targets: np.ndarray, smoothing: float = 0.1):
        if logits.ndim != 2:
            raise ShapeError(f"smoothed_cross_entropy needs [n, K] logits, got {logits.shape}")
        n, k = logits.shape
        targets = np.asarray(targets, dtype=np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.prob = np.exp(log_probs)
        self.q = np.full((n, k), smoothing / k, dtype=logits.dtype)
        self.q[np.arange(n), targets] += 1.0 - smoothing
        nll = -log_probs[np.arange(n), targets]
        smooth = -log_probs.mean(axis=1)
        return np.mean((1.0 - smoothing) * nll + smoothing * smooth)

    def backward(self, grad):
        return (grad * (self.prob - self.q) / self.prob.shape[0],)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(a, axes=axes)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Permute.apply(a, axes=axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=shape)


def gather(a: Tensor, index: Sequence[int], axis: int = 0) -> Tensor:
    return Gather.apply(a, index=index, axis=axis)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    return Concat.apply(*parts, axis=axis)


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def sigmoid_bce(logits: Tensor, targets: Union[np.ndarray, Sequence]) -> Tensor:
    return SigmoidBCE.apply(logits, targets=np.asarray(targets))


def label_smoothed_cross_entropy(logits: Tensor, targets: Sequence[int], smoothing: float = 0.1) -> Tensor:
    return SmoothedCrossEntropy.apply(logits, targets=np.asarray(targets), smoothing=float(smoothing))
