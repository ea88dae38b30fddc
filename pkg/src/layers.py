"""
Parameter containers and the learnable building blocks shared by the
vision, encoder and decoder stacks.

A ``Module`` discovers its parameters and sub-modules from its attributes
in definition order, so parameter names (``layers.0.attention.query.weight``)
are stable and double as checkpoint keys.
"""

import math

import numpy as np

from . import numeric as nm
from .errors import CheckpointError, ShapeError
from .numeric import Tensor
from .rng import Rng


class Module:
    """Base class: named parameters, train/eval mode, state dicts."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[prefix + key] = value
        for key, child in self._children():
            params.update(child.named_parameters(prefix + key + "."))
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=nm.DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.copy()


class Linear(Module):
    """``y = x @ weight + bias`` with weight [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = nm.parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = nm.parameter(rng.uniform(-bound, bound, (out_features,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return nm.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: Rng, std: float = 0.02):
        super().__init__()
        self.weight = nm.parameter(rng.normal(0.0, std, (num_embeddings, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        return nm.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = nm.LAYER_NORM_EPS):
        super().__init__()
        self.gamma = nm.parameter(np.ones(dim))
        self.beta = nm.parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0):
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * kernel * kernel)
        self.weight = nm.parameter(rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)))
        self.bias = nm.parameter(rng.uniform(-bound, bound, (out_channels,)))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return nm.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int, int],
        rng: Rng,
        stride: tuple[int, int, int] = (1, 1, 1),
        padding: tuple[int, int, int] = (0, 0, 0),
    ):
        super().__init__()
        bound = 1.0 / math.sqrt(in_channels * int(np.prod(kernel)))
        self.weight = nm.parameter(rng.uniform(-bound, bound, (out_channels, in_channels) + tuple(kernel)))
        self.bias = nm.parameter(rng.uniform(-bound, bound, (out_channels,)))
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def forward(self, x: Tensor) -> Tensor:
        return nm.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention over ``num_heads`` heads.

    Masked key columns get a score of -inf, so they receive exactly zero
    attention mass. The last attention weights are kept on
    ``last_attention`` for inspection.
    """

    def __init__(self, dim: int, num_heads: int, rng: Rng, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"attention dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = Linear(dim, dim, rng.child("query"))
        self.key = Linear(dim, dim, rng.child("key"))
        self.value = Linear(dim, dim, rng.child("value"))
        self.output = Linear(dim, dim, rng.child("output"))
        self.dropout = dropout
        self._dropout_rng = rng.child("dropout")
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(
        self,
        query: Tensor,
        key_value: Tensor,
        key_mask: np.ndarray | None = None,
        causal: bool = False,
    ) -> Tensor:
        b, nq, d = query.shape
        nk = key_value.shape[1]
        q = self._split(self.query(query))
        k = self._split(self.key(key_value))
        v = self._split(self.value(key_value))

        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        allowed = np.ones((b, 1, nq, nk), dtype=bool)
        if key_mask is not None:
            allowed &= np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            allowed &= np.tril(np.ones((nq, nk), dtype=bool))[None, None]
        scores = nm.where(allowed, scores, -np.inf)
        attn = nm.softmax(scores, axis=-1)
        self.last_attention = attn.data
        attn = nm.dropout(attn, self.dropout, self._dropout_rng, self.training)

        context = (attn @ v).transpose(0, 2, 1, 3).reshape(b, nq, d)
        return self.output(context)
