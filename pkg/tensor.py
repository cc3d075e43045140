"""
Dense tensors with a reverse-mode autodiff tape.

Operations are recorded only while a `Tape` is active on the current thread:

    with Tape():
        loss = F.sum(F.matmul(a, b))
        grads = backward(loss)

Tapes are thread-local, so independent samples can be differentiated on
worker threads without sharing state.
"""
import logging
import threading
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

DTYPES: Dict[str, type] = {"f32": np.float32, "f64": np.float64}

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def resolve_dtype(dtype: Union[str, type, np.dtype, None]) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TypeError(f"Unsupported dtype {dtype!r}; expected f32 or f64")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


class Tensor:
    """
    Row-major array plus autodiff bookkeeping.

    `node` is the index of the tape entry that produced this tensor; leaves
    (parameters, inputs) have no node.
    """

    __slots__ = ("data", "requires_grad", "node", "tape", "name")

    def __init__(
        self,
        data: Any,
        dtype: Union[str, type, None] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if 0 in arr.shape:
            raise ShapeError(f"Tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> str:
        return dtype_name(self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype: Union[str, type]) -> "Tensor":
        return Tensor(self.data.astype(resolve_dtype(dtype)), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}{label}>"

    # Operator sugar; the rules live in functional.py.
    def __add__(self, other: "Tensor") -> "Tensor":
        import functional as F
        return F.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        import functional as F
        return F.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        import functional as F
        return F.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        import functional as F
        return F.matmul(self, other)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which maps the
    gradient of the output to one gradient (or None) per tensor input. Values
    needed by `backward` are stored on the instance during `forward`.
    """

    op: str = "function"

    def __init__(self, needs_grad: Tuple[bool, ...]):
        self.needs_grad = needs_grad

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.op}: forward not implemented")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.op}: backward not implemented")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        dtypes = {t.data.dtype for t in tensors}
        if len(dtypes) > 1:
            raise TypeError(f"{cls.op}: mixed dtypes {sorted(str(d) for d in dtypes)}")

        tape = current_tape()
        needs_grad = tuple(t.requires_grad for t in tensors)
        record = tape is not None and any(needs_grad)

        fn = cls(needs_grad)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        out = np.asarray(out, dtype=tensors[0].data.dtype)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"Operation '{cls.op}' produced non-finite values", op=cls.op)

        result = Tensor(out, requires_grad=record)
        if record:
            result.node = tape.record(fn, tensors)
            result.tape = tape
        return result


class TapeNode:
    __slots__ = ("fn", "inputs")

    def __init__(self, fn: Function, inputs: Tuple[Tensor, ...]):
        self.fn = fn
        self.inputs = inputs

    @property
    def op(self) -> str:
        return self.fn.op


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def record(self, fn: Function, inputs: Tuple[Tensor, ...]) -> int:
        self.nodes.append(TapeNode(fn, inputs))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _key(tensor: Tensor) -> str:
    return tensor.name if tensor.name else f"#{id(tensor)}"


class GradMap:
    """Gradients of leaf tensors, addressable by tensor or by parameter name."""

    def __init__(self):
        self._grads: Dict[str, Tensor] = {}
        self._leaves: Dict[str, Tensor] = {}

    def _accumulate(self, leaf: Tensor, grad: np.ndarray) -> None:
        key = _key(leaf)
        if key in self._grads:
            self._grads[key].data += grad
        else:
            self._grads[key] = Tensor(np.array(grad, dtype=leaf.data.dtype, copy=True))
            self._leaves[key] = leaf

    def __getitem__(self, key: Union[str, Tensor]) -> Tensor:
        if isinstance(key, Tensor):
            key = _key(key)
        return self._grads[key]

    def get(self, key: Union[str, Tensor], default: Any = None) -> Any:
        try:
            return self[key]
        except KeyError:
            return default

    def __contains__(self, key: Union[str, Tensor]) -> bool:
        if isinstance(key, Tensor):
            key = _key(key)
        return key in self._grads

    def __iter__(self) -> Iterator[str]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()

    def dense(self, params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
        """Gradient arrays for every named parameter, zeros where none flowed."""
        out = {}
        for name, param in params.items():
            grad = self._grads.get(name)
            out[name] = grad.data if grad is not None else np.zeros_like(param.data)
        return out


def backward(loss: Tensor) -> GradMap:
    """Reverse accumulation from a scalar loss to every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.tape is None:
        raise ValueError("Loss was not recorded; run the forward pass inside `with Tape():`")

    tape = loss.tape
    pending: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    grads = GradMap()

    for index in range(loss.node, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = tape.nodes[index]
        input_grads = node.fn.backward(grad)
        for tensor, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            if input_grad.shape != tensor.shape:
                raise ShapeError(
                    f"Backward rule of '{node.op}' returned shape {input_grad.shape} for input {tensor.shape}"
                )
            if tensor.node is not None and tensor.tape is tape:
                if tensor.node in pending:
                    pending[tensor.node] = pending[tensor.node] + input_grad
                else:
                    pending[tensor.node] = input_grad
            else:
                grads._accumulate(tensor, input_grad)
    return grads


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Tensor,
    eps: float = 1e-6,
    coords: Optional[Sequence[int]] = None,
) -> Tensor:
    """
    Central differences (f(x+eps*e) - f(x-eps*e)) / 2eps, one coordinate at a time.

    `x.data` is perturbed in place and restored, so `f` may either consume its
    argument or close over `x`. When `coords` (flat indices) is given only
    those entries are evaluated; the rest of the result stays zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate() -> float:
        with no_grad():
            value = f(x)
        return value.item() if isinstance(value, Tensor) else float(value)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = evaluate()
        flat[i] = original - eps
        minus = evaluate()
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; two all-zero vectors agree exactly."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / max(denom, 1e-300))
