"""Parameter containers and transformer building blocks."""

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    gelu,
    layernorm,
    masked_fill,
    matmul,
    permute,
    reshape,
    scale,
    softmax,
)

MASK_VALUE = -1e9


def init_param(
    rng: np.random.Generator, shape: Tuple[int, ...], std: float
) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def const_param(shape: Tuple[int, ...], value: float) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


class Module:
    """Base class; parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, param in self.named_parameters():
            param.zero_grad()

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        """Copy values into existing parameters; names and shapes must match."""
        params = self.parameters()
        if set(params) != set(values):
            missing = sorted(set(params) - set(values))
            unexpected = sorted(set(values) - set(params))
            raise ShapeError(
                f"parameter names differ: missing {missing}, unexpected {unexpected}"
            )
        for name, param in params.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != param.shape:
                raise ShapeError(
                    f"parameter {name}: expected shape {param.shape}, got {value.shape}"
                )
            param.data[...] = value


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
    ):
        self.weight = init_param(
            rng, (in_features, out_features), 1.0 / math.sqrt(in_features)
        )
        self.bias = const_param((out_features,), 0.0) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = const_param((width,), 1.0)
        self.bias = const_param((width,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Self-attention over the second-to-last axis of ``(..., T, D)`` inputs."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ShapeError(f"{heads} heads do not divide width {width}")
        self.heads = heads
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, width = x.shape
        x = reshape(x, (*lead, length, self.heads, width // self.heads))
        n = len(lead)
        return permute(x, (*range(n), n + 1, n, n + 2))

    def __call__(self, x: Tensor, blocked: Optional[np.ndarray] = None) -> Tensor:
        """``blocked`` is true where a query may not attend to a key."""
        *lead, length, width = x.shape
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        n = len(lead)
        k_t = permute(k, (*range(n + 1), n + 2, n + 1))
        scores = scale(matmul(q, k_t), 1.0 / math.sqrt(width // self.heads))
        if blocked is not None:
            scores = masked_fill(scores, blocked, MASK_VALUE)
        mixed = matmul(softmax(scores), v)
        mixed = permute(mixed, (*range(n), n + 1, n, n + 2))
        return self.out(reshape(mixed, (*lead, length, width)))


class TransformerBlock(Module):
    """Pre-norm block: attention then a GELU MLP, each with a residual path."""

    def __init__(
        self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator
    ):
        self.ln_attn = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng)
        self.ln_mlp = LayerNorm(width)
        self.fc_in = Linear(width, width * mlp_ratio, rng)
        self.fc_out = Linear(width * mlp_ratio, width, rng)

    def __call__(self, x: Tensor, blocked: Optional[np.ndarray] = None) -> Tensor:
        x = add(x, self.attn(self.ln_attn(x), blocked))
        return add(x, self.fc_out(gelu(self.fc_in(self.ln_mlp(x)))))


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: position t sees only positions <= t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """Expand ``(..., T)`` key validity into a ``(..., 1, 1, T)`` blocked mask."""
    valid = np.asarray(valid, dtype=bool)
    return ~valid[..., None, None, :]
