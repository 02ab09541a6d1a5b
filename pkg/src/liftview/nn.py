"""Layer library and composite helpers on top of the tensor engine.

Modules discover their parameters by walking attributes in sorted order, so
parameter naming (and therefore checkpoint layout and optimizer iteration
order) is deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from liftview import tensor as T
from liftview.tensor import Tensor


class Module:
    """Base class with recursive, deterministically-ordered parameter discovery."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: dict[str, Tensor]) -> None:
        for name in sorted(vars(self)):
            self._collect_value(prefix + name, getattr(self, name), out)

    @staticmethod
    def _collect_value(name: str, value, out: dict[str, Tensor]) -> None:
        if isinstance(value, Tensor):
            if value.requires_grad:
                out[name] = value
        elif isinstance(value, Module):
            value._collect(name + ".", out)
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                Module._collect_value(f"{name}.{i}", item, out)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(f"load_state: missing={missing} unexpected={extra}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ValueError(f"load_state: shape of {k} is {a.shape}, expected {p.data.shape}")
            p.data = np.ascontiguousarray(a)

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad = None


class Linear(Module):
    """Affine map on the trailing axis: y = x @ W + b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Conv2d(Module):
    """3x3-style same-size convolution layer (stride 1, odd kernel)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        fan_in = c_in * k * k
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Composite helpers (built only from engine primitives)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), computed as relu(x) + log(exp(x - relu(x)) + exp(-relu(x))).

    The rewrite keeps every exponent non-positive, so it is overflow-free for
    any input while staying differentiable through listed primitives.
    """
    m = T.relu(x)
    return T.add(m, T.log(T.add(T.exp(T.sub(x, m)), T.exp(T.mul(m, -1.0)))))


def absval(x: Tensor) -> Tensor:
    """|x| as relu(x) + relu(-x)."""
    return T.add(T.relu(x), T.relu(T.mul(x, -1.0)))


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling on the trailing two axes (must be even)."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2x: trailing dims must be even, got {h}x{w}")
    lead = x.shape[:-2]
    y = T.reshape(x, lead + (h // 2, 2, w // 2, 2))
    nd = y.ndim
    return T.tmean(y, axes=(nd - 3, nd - 1))


def channel_affine(x: Tensor, scale: Tensor | None, shift: Tensor | None) -> Tensor:
    """Per-channel affine on a [C,H,W] map; scale/shift are [C] vectors."""
    c = x.shape[0]
    if scale is not None:
        x = T.mul(x, T.reshape(scale, (c, 1, 1)))
    if shift is not None:
        x = T.add(x, T.reshape(shift, (c, 1, 1)))
    return x


def to_tokens(x: Tensor) -> Tensor:
    """[C,H,W] -> [H*W, C] token matrix."""
    c, h, w = x.shape
    return T.permute(T.reshape(x, (c, h * w)), (1, 0))


def from_tokens(tok: Tensor, h: int, w: int) -> Tensor:
    """[H*W, C] -> [C,H,W]."""
    c = tok.shape[1]
    return T.reshape(T.permute(tok, (1, 0)), (c, h, w))


def sinusoidal_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos positional embedding of a scalar timestep (constant)."""
    if dim % 2:
        raise ValueError("sinusoidal_embedding: dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])
