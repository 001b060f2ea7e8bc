"""Minimal reverse-mode automatic differentiation on f64 numpy arrays.

Define-by-run: every op records its parents and a backward closure on the
output tensor; backward() topologically sorts the graph and accumulates
gradients (fan-out sums). The graph is per-forward and garbage-collected
after backward. Every op checks its output for NaN/Inf.
"""
from __future__ import annotations

import json
import math
import os

import numpy as np
from scipy.special import erf

SQRT_2 = math.sqrt(2.0)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class AutodiffError(RuntimeError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise AutodiffError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basics ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _needs_graph(self, *others) -> bool:
        return self.requires_grad or any(o.requires_grad for o in others)

    def backward(self) -> None:
        """Populate grads of every requires-grad ancestor of this scalar."""
        if self.size != 1:
            raise AutodiffError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        for t in topo:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data + other.data, self._needs_graph(other),
                     (self, other), None, "add")

        def bw(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))
        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, self.requires_grad, (self,), None, "neg")
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(self.data * other.data, self._needs_graph(other),
                     (self, other), None, "mul")

        def bw(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))
        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return Tensor._lift(other) * self ** -1.0

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, self.requires_grad, (self,), None, "pow")
        out._backward = lambda g: self._accum(g * exponent * self.data ** (exponent - 1.0))
        return out

    def __matmul__(self, other):
        other = Tensor._lift(other)
        out = Tensor(np.matmul(self.data, other.data), self._needs_graph(other),
                     (self, other), None, "matmul")

        def bw(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 1:  # inner product
                self._accum(g * b)
                other._accum(g * a)
                return
            if b.ndim == 1:      # (..., N, K) @ (K,) -> (..., N)
                ga = g[..., None] * b
                gb = (a * g[..., None]).reshape(-1, a.shape[-1]).sum(axis=0)
            elif a.ndim == 1:    # (K,) @ (..., K, M) -> (..., M)
                ga = (b * g[..., None, :]).sum(axis=-1).reshape(-1, a.shape[0]).sum(axis=0)
                gb = a[:, None] * g[..., None, :]
            else:
                ga = np.matmul(g, np.swapaxes(b, -1, -2))
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
            self._accum(_unbroadcast(np.asarray(ga), self.shape))
            other._accum(_unbroadcast(np.asarray(gb), other.shape))
        out._backward = bw
        return out

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), self.requires_grad, (self,), None, "reshape")
        out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), self.requires_grad, (self,), None, "transpose")
        out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], self.requires_grad, (self,), None, "slice")

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)
        out._backward = bw
        return out

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     self.requires_grad, (self,), None, "sum")

        def bw(g):
            if axis is None:
                self._accum(np.broadcast_to(g, self.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(ge, self.shape).copy())
        out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else \
            np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- nonlinearities ----------------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), self.requires_grad, (self,), None, "relu")
        out._backward = lambda g: self._accum(g * (self.data > 0))
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, self.requires_grad, (self,), None, "tanh")
        out._backward = lambda g: self._accum(g * (1.0 - y ** 2))
        return out

    def gelu(self):
        """Exact (erf) GELU."""
        x = self.data
        phi = 0.5 * (1.0 + erf(x / SQRT_2))
        y = x * phi
        out = Tensor(y, self.requires_grad, (self,), None, "gelu")
        pdf = np.exp(-0.5 * x ** 2) / math.sqrt(2.0 * math.pi)
        out._backward = lambda g: self._accum(g * (phi + x * pdf))
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, self.requires_grad, (self,), None, "exp")
        out._backward = lambda g: self._accum(g * y)
        return out


# -- composite ops ---------------------------------------------------------


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors), tuple(tensors), None, "concat")
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            t._accum(g[tuple(sl)])
            start += s
    out._backward = bw
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(*t.shape[:axis], 1, *t.shape[axis:]) for t in tensors], axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max shift is treated as a constant."""
    m = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = (x - m).exp()
    return e / e.sum(axis=axis, keepdims=True)


def layernorm(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Pre-affine layer normalization: per-axis mean 0, variance 1."""
    mu = x.mean(axis=axis, keepdims=True)
    centered = x - mu
    var = (centered ** 2.0).mean(axis=axis, keepdims=True)
    return centered * (var + eps) ** -0.5


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over (..., N, D) token matrices."""
    *lead, n, d = q.shape
    if d % heads != 0:
        raise AutodiffError(f"embed dim {d} not divisible by {heads} heads")
    dh = d // heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # (..., N, heads, dh) -> (..., heads, N, dh)

    def split(t):
        return t.reshape(*lead, n, heads, dh).transpose(*perm)

    qh, kh, vh = split(q), split(k), split(v)
    swap = tuple(range(nl + 1)) + (nl + 2, nl + 1)
    scores = (qh @ kh.transpose(*swap)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    out = attn @ vh  # (..., heads, N, dh)
    return out.transpose(*perm).reshape(*lead, n, d)


def attention_pool(tokens: Tensor, query: Tensor) -> Tensor:
    """Attention-weighted pooling of (..., N, D) tokens with a learned (D,) query."""
    *lead, n, d = tokens.shape
    scores = tokens @ query * (1.0 / math.sqrt(d))  # (..., N)
    w = softmax(scores, axis=-1)
    if not lead:
        return w @ tokens  # (D,)
    pooled = w.reshape(*lead, 1, n) @ tokens  # (..., 1, D)
    return pooled.reshape(*lead, d)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution; x (C_in, H, W) or (B, C_in, H, W), weight (C_out, C_in, kh, kw)."""
    single = x.data.ndim == 3
    xb = x.reshape(1, *x.shape) if single else x
    B, C, H, W = xb.shape
    CO, CI, KH, KW = weight.shape
    if CI != C:
        raise AutodiffError(f"conv2d channel mismatch: input {C}, weight {CI}")
    OH = (H + 2 * padding - KH) // stride + 1
    OW = (W + 2 * padding - KW) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # im2col: (B, C, KH, KW, OH, OW)
    strides = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (B, C, KH, KW, OH, OW),
        (strides[0], strides[1], strides[2], strides[3],
         strides[2] * stride, strides[3] * stride), writeable=False)
    cols2 = np.ascontiguousarray(cols.reshape(B, C * KH * KW, OH * OW))
    wf = weight.data.reshape(CO, C * KH * KW)
    ydata = np.matmul(wf, cols2).reshape(B, CO, OH, OW)
    if bias is not None:
        ydata = ydata + bias.data.reshape(1, CO, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(ydata, any(p.requires_grad for p in parents), parents, None, "conv2d")

    def bw(g):
        gb = np.ascontiguousarray(g.reshape(B, CO, OH * OW))
        gw = np.matmul(gb, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        weight._accum(gw)
        if bias is not None:
            bias._accum(g.sum(axis=(0, 2, 3)))
        gcols = np.matmul(wf.T, gb).reshape(B, C, KH, KW, OH, OW)
        gxp = np.zeros_like(xp)
        for i in range(KH):
            for j in range(KW):
                gxp[:, :, i:i + OH * stride:stride, j:j + OW * stride:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W]
        x._accum(gx.reshape(x.shape))
    out._backward = bw
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return ((pred - Tensor._lift(target)) ** 2.0).mean()


# -- parameters & init -----------------------------------------------------


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     clip: float = 2.0) -> np.ndarray:
    """Normal(0, std) with resampling outside +/- clip*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > clip * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > clip * std
    return out


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


# -- optimizer -------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a list of parameter Tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state_dict(self, d: dict) -> None:
        self.step_count = d["step"]
        self.m = [a.copy() for a in d["m"]]
        self.v = [a.copy() for a in d["v"]]


# -- gradient checking -----------------------------------------------------


def grad_check(f, params: list[Tensor], eps: float = 1e-5,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> tuple[float, tuple]:
    """Central finite differences vs backward(); returns (max rel err, location).

    f() must be a deterministic closure over `params` returning a scalar Tensor.
    """
    loss = f()
    loss.backward()
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    worst, where = 0.0, (-1, -1)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            rng = rng or np.random.Generator(np.random.PCG64(0))
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        g = grads[pi].reshape(-1) if grads[pi] is not None else np.zeros(n)
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            dn = f().item()
            flat[j] = orig
            fd = (up - dn) / (2 * eps)
            denom = max(abs(fd), abs(g[j]), 1e-8)
            rel = abs(fd - g[j]) / denom
            if rel > worst:
                worst, where = rel, (pi, int(j))
    return worst, where


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path: str, tensors: dict[str, Tensor | np.ndarray],
                    header: dict | None = None) -> None:
    """Write `path`.json (manifest) and `path`.bin (one little-endian f64 blob)."""
    manifest = {"header": header or {}, "tensors": []}
    offset = 0
    blob = bytearray()
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name])
        arr = arr.astype("<f8")
        raw = arr.tobytes()
        manifest["tensors"].append({"name": name, "shape": list(arr.shape),
                                    "offset": offset, "length": len(raw)})
        blob.extend(raw)
        offset += len(raw)
    manifest["total_bytes"] = offset
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1)
    with open(path + ".bin", "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Load a checkpoint; verifies blob length and per-tensor shapes."""
    with open(path + ".json") as f:
        manifest = json.load(f)
    with open(path + ".bin", "rb") as f:
        blob = f.read()
    if len(blob) != manifest["total_bytes"]:
        raise AutodiffError(f"checkpoint blob length {len(blob)} != manifest {manifest['total_bytes']}")
    out = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["length"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
        if arr.size * 8 != entry["length"]:
            raise AutodiffError(f"tensor {entry['name']}: shape/length mismatch")
        out[entry["name"]] = arr
    return out, manifest.get("header", {})
