"""Small layer library on top of the autodiff engine.

Initialization: truncated normal (std 0.02) for projection weights, zeros for
biases and positional embeddings.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


class Module:
    """Parameter container with recursive name-based access."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = ad.param(data)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_params(prefix + name + "."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        named = self.named_params(prefix)
        missing = set(named) - set(arrays)
        if missing:
            raise ad.AutodiffError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
        for name, t in named.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise ad.AutodiffError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(np.float64).copy()

    def copy_from(self, other: "Module") -> None:
        self.load_arrays({k: v.data for k, v in other.named_params().items()})

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.w = self.add_param("w", ad.truncated_normal(rng, (d_in, d_out), INIT_STD))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x) * self.gamma + self.beta


class MLP(Module):
    def __init__(self, rng, dims: list[int], activation: str = "gelu"):
        super().__init__()
        self.layers = [self.add_child(f"fc{i}", Linear(rng, a, b))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.gelu() if self.activation == "gelu" else x.relu()
        return x


class TransformerBlock(Module):
    """Pre-LN transformer block over (N, D) token matrices."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.qkv = self.add_child("qkv", Linear(rng, dim, 3 * dim))
        self.proj = self.add_child("proj", Linear(rng, dim, dim))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.mlp = self.add_child("mlp", MLP(rng, [dim, mlp_ratio * dim, dim]))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        qkv = self.qkv(h)
        d = x.shape[-1]
        q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
        x = x + self.proj(ad.attention(q, k, v, self.heads))
        return x + self.mlp(self.ln2(x))


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.w = self.add_param("w", ad.truncated_normal(rng, (c_out, c_in, kernel, kernel), INIT_STD))
        self.b = self.add_param("b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ResidualConvBlock(Module):
    """conv3x3-relu-conv3x3 with identity skip, then relu."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.c1 = self.add_child("c1", Conv2d(rng, channels, channels, 3, padding=1))
        self.c2 = self.add_child("c2", Conv2d(rng, channels, channels, 3, padding=1))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.c2(self.c1(x).relu())
        return (x + h).relu()
