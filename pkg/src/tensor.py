"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new ``Tensor``. When any input requires a gradient
(and gradients are enabled for the current thread) the result keeps a closure
that maps the output gradient to one gradient per input. Creation order is
recorded with a global counter, so sorting the reachable nodes by that counter
gives a valid topological order: inputs always exist before the node that
consumes them.

Shapes never broadcast implicitly, with one exception: an operand whose shape
is a suffix of the other operand's shape is expanded over the leading axes
(a bias of shape ``(C,)`` added to ``(B, T, C)``, a scalar multiplied into any
tensor). Everything else is a ``ShapeError``.
"""

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_expit

logger = logging.getLogger(__name__)

_creation_counter = itertools.count()
_grad_state = threading.local()

LAYERNORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class TensorError(Exception):
    """Base class for autodiff failures."""

    pass


class ShapeError(TensorError, ValueError):
    """Raised when operand shapes do not conform to an operation."""

    pass


class NumericalError(TensorError, ArithmeticError):
    """Raised when an operation produces NaN or infinite values."""

    pass


class GradientError(TensorError, RuntimeError):
    """Raised when backward is called on an unusable root."""

    pass


def grad_enabled() -> bool:
    """Whether operations on this thread record the tape."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._released = False
        self._order = next(_creation_counter)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Copy of the values, detached from the tape."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _check_finite(kind: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{kind} produced non-finite values")


def _result(
    kind: str,
    values: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    _check_finite(kind, values)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(values, dtype=np.float64)
    out.grad = None
    out.name = None
    out._released = False
    out._order = next(_creation_counter)
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.op = kind
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.op = "leaf"
        out._parents = ()
        out._backward = None
    return out


def _is_suffix(short: Tuple[int, ...], full: Tuple[int, ...]) -> bool:
    return len(short) <= len(full) and tuple(full[len(full) - len(short) :]) == tuple(
        short
    )


def _expansion_shape(kind: str, a: Tuple[int, ...], b: Tuple[int, ...]):
    if a == b or _is_suffix(a, b):
        return b
    if _is_suffix(b, a):
        return a
    raise ShapeError(f"{kind}: shapes {a} and {b} do not conform")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that were expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion_shape("add", a.shape, b.shape)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion_shape("sub", a.shape, b.shape)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion_shape("mul", a.shape, b.shape)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _expansion_shape("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise NumericalError("div: division by zero")
    values = a.data / b.data

    def backward(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * values / b.data, b.shape),
        )

    return _result("div", values, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _result("scale", x.data * factor, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch axes expand only over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _expansion_shape("matmul", a.shape[:-2], b.shape[:-2])

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(grad_a, a.shape), _reduce_to(grad_b, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), backward)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), backward)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got shape {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        values = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}")

    def backward(g):
        return (g.reshape(x.shape),)

    return _result("reshape", values, (x,), backward)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat size-1 axes (and new leading axes) up to ``shape``."""
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    padded = (1,) * (len(shape) - x.ndim) + x.shape
    for have, want in zip(padded, shape):
        if have != want and have != 1:
            raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    summed = tuple(
        i for i, (have, want) in enumerate(zip(padded, shape)) if have != want
    )

    def backward(g):
        grad = g.sum(axis=summed, keepdims=True) if summed else g
        return (grad.reshape(x.shape),)

    values = np.broadcast_to(x.data.reshape(padded), shape).copy()
    return _result("expand", values, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} do not conform"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    values = np.concatenate([t.data for t in tensors], axis=axis)
    return _result("concat", values, tensors, backward)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced numpy indexing; repeated indices accumulate gradient."""
    try:
        values = np.array(x.data[key], dtype=np.float64)
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _result("slice", values, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    values = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * values).sum(axis=-1, keepdims=True)
        return (values * (g - dot),)

    return _result("softmax-last-axis", values, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    values = expit(x.data)

    def backward(g):
        return (g * values * (1.0 - values),)

    return _result("sigmoid", values, (x,), backward)


def log_sigmoid(x: Tensor) -> Tensor:
    """Fused log(sigmoid(x)) = -softplus(-x)."""
    values = log_expit(x.data)

    def backward(g):
        return (g * expit(-x.data),)

    return _result("log-sigmoid", values, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise NumericalError("log: non-positive input")

    def backward(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = np.exp(x.data)

    def backward(g):
        return (g * values,)

    return _result("exp", values, (x,), backward)


def layernorm(
    x: Tensor,
    gain: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = LAYERNORM_EPS,
) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply affine."""
    width = x.shape[-1]
    for param, label in ((gain, "gain"), (bias, "bias")):
        if param is not None and param.shape != (width,):
            raise ShapeError(
                f"layernorm: {label} shape {param.shape} does not match {x.shape}"
            )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    values = normed
    if gain is not None:
        values = values * gain.data
    if bias is not None:
        values = values + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        g_normed = g * gain.data if gain is not None else g
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads: List[np.ndarray] = [grad_x]
        if gain is not None:
            grads.append(_reduce_to(g * normed, gain.shape))
        if bias is not None:
            grads.append(_reduce_to(g, bias.shape))
        return grads

    return _result("layernorm", values, parents, backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    values = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * local,)

    return _result("gelu", values, (x,), backward)


def reduce_sum(
    x: Tensor,
    axis: Optional[int] = None,
    keepdims: bool = False,
    exact: bool = False,
) -> Tensor:
    """Sum over one axis or all axes; ``exact`` rounds the total sum once."""
    if axis is None:
        if exact:
            values = np.array(math.fsum(x.data.reshape(-1).tolist()))
        else:
            values = np.array(x.data.sum())
        if keepdims:
            values = values.reshape((1,) * x.ndim)
    else:
        if exact:
            raise ShapeError("sum-axis: exact summation only over all axes")
        values = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum-axis", values, (x,), backward)


def reduce_mean(
    x: Tensor, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    values = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean-axis", np.asarray(values), (x,), backward)


def l2_normalize(x: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """Divide each row of the last axis by max(norm, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    values = x.data / denom
    clamped = norm < eps

    def backward(g):
        dot = (g * values).sum(axis=-1, keepdims=True)
        projected = (g - values * dot) / denom
        return (np.where(clamped, g / denom, projected),)

    return _result("l2-normalize-last-axis", values, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; out-of-range ids are rejected."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding-lookup: ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(
            f"embedding-lookup: id {int(ids.max())} outside table of {vocab} rows"
        )

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result("embedding-lookup", table.data[ids], (table,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; the mask broadcasts to ``x``."""
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    except ValueError:
        raise ShapeError(f"masked-fill: mask does not broadcast to {x.shape}")
    values = np.where(mask, float(value), x.data)

    def backward(g):
        return (np.where(mask, 0.0, g),)

    return _result("masked-fill", values, (x,), backward)


OPS: Dict[str, Callable[..., Tensor]] = {
    "matmul": lambda inputs, **kw: matmul(*inputs),
    "add": lambda inputs, **kw: add(*inputs),
    "sub": lambda inputs, **kw: sub(*inputs),
    "mul": lambda inputs, **kw: mul(*inputs),
    "div": lambda inputs, **kw: div(*inputs),
    "scale": lambda inputs, **kw: scale(inputs[0], kw["factor"]),
    "transpose": lambda inputs, **kw: (
        permute(inputs[0], kw["axes"]) if "axes" in kw else transpose(inputs[0])
    ),
    "reshape": lambda inputs, **kw: reshape(inputs[0], kw["shape"]),
    "expand": lambda inputs, **kw: expand(inputs[0], kw["shape"]),
    "concat": lambda inputs, **kw: concat(inputs, kw.get("axis", 0)),
    "slice": lambda inputs, **kw: index(inputs[0], kw["key"]),
    "softmax-last-axis": lambda inputs, **kw: softmax(inputs[0]),
    "sigmoid": lambda inputs, **kw: sigmoid(inputs[0]),
    "log-sigmoid": lambda inputs, **kw: log_sigmoid(inputs[0]),
    "log": lambda inputs, **kw: log(inputs[0]),
    "exp": lambda inputs, **kw: exp(inputs[0]),
    "layernorm": lambda inputs, **kw: layernorm(*inputs),
    "gelu": lambda inputs, **kw: gelu(inputs[0]),
    "mean-axis": lambda inputs, **kw: reduce_mean(
        inputs[0], kw.get("axis"), kw.get("keepdims", False)
    ),
    "sum-axis": lambda inputs, **kw: reduce_sum(
        inputs[0], kw.get("axis"), kw.get("keepdims", False), kw.get("exact", False)
    ),
    "l2-normalize-last-axis": lambda inputs, **kw: l2_normalize(inputs[0]),
    "embedding-lookup": lambda inputs, **kw: embedding(inputs[0], kw["ids"]),
    "masked-fill": lambda inputs, **kw: masked_fill(
        inputs[0], kw["mask"], kw["value"]
    ),
}


def forward_op(kind: str, inputs: Sequence[ArrayLike], **params) -> Tensor:
    """Dispatch an operation by its kind name."""
    try:
        op = OPS[kind]
    except KeyError:
        raise TensorError(f"Unknown operation kind: {kind}")
    return op([as_tensor(t) for t in inputs], **params)


def record_tape(root: Tensor) -> List[Tensor]:
    """Nodes reachable from ``root`` in construction order."""
    seen = set()
    nodes: List[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf, then free the graph."""
    if root.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    if root._released:
        raise GradientError("backward already ran for this root; graph was released")
    if not root.requires_grad or root._backward is None:
        raise GradientError("backward root is detached from the tape")

    nodes = record_tape(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad

    for node in nodes:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


def numerical_grad(
    fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5
) -> List[np.ndarray]:
    """Central finite differences of a scalar function, one array per input."""
    grads = []
    with no_grad():
        for tensor in inputs:
            grad = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                upper = fn(*inputs).item()
                flat[i] = original - eps
                lower = fn(*inputs).item()
                flat[i] = original
                grad.reshape(-1)[i] = (upper - lower) / (2.0 * eps)
            grads.append(grad)
    return grads


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> bool:
    """Compare analytic gradients against central finite differences.

    Passes when every element satisfies ``|analytic - fd| <= atol + rtol * |fd|``.
    Inputs must be leaf tensors with ``requires_grad`` set.
    """
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn(*inputs))
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    numeric = numerical_grad(fn, inputs, eps)
    ok = True
    for tensor, a, n in zip(inputs, analytic, numeric):
        excess = np.abs(a - n) - (atol + rtol * np.abs(n))
        if np.any(excess > 0):
            worst = int(np.argmax(excess))
            logger.debug(
                f"gradcheck mismatch on {tensor.name or tensor.shape}: "
                f"analytic {a.reshape(-1)[worst]} vs numeric {n.reshape(-1)[worst]}"
            )
            ok = False
    return ok
