"""Parameter containers and the layers the models are assembled from."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as T
from .rng import Rng
from .autograd import Tensor


def _uniform(rng: Rng, shape, bound: float) -> Tensor:
    data = rng.uniform(-bound, bound, shape, dtype=np.float32)
    return Tensor(data, requires_grad=True)


class Module:
    """Recursively collects ``Tensor`` parameters from attributes.

    Names are dotted attribute paths in definition order, so two modules
    built from the same config always enumerate parameters identically.
    """

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def astype(self, dtype) -> "Module":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise T.ShapeError(f"load_state_dict: {k} expects {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: Rng, bias: bool = True):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = _uniform(rng, (fan_in, fan_out), bound)
        self.bias = Tensor(np.zeros(fan_out, np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: Rng, stride: int = 1, padding: int = 0):
        bound = 1.0 / math.sqrt(cin * kernel)
        self.weight = _uniform(rng, (kernel, cin, cout), bound)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: Rng, scale: float = 0.02):
        self.weight = Tensor(rng.normal((num, dim)) * scale, requires_grad=True)

    def forward(self, ids) -> Tensor:
        return self.weight[np.asarray(ids)]


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads:
            raise ValueError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        """x: (B, T, C).  key_mask: (B, T) bool, True for attendable keys."""
        B, n, C = x.shape
        H = self.heads
        dh = C // H
        qkv = self.qkv(x).reshape(B, n, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.T) * (1.0 / math.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
            scores = scores + bias
        att = T.softmax(scores, axis=-1)
        y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, C)
        return self.proj(y)


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: Rng):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, hidden, rng)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


def param_count(module: Module) -> int:
    return sum(p.size for p in module.parameters())
