"""Dense float64 tensors with reverse-mode automatic differentiation.

Execution is eager: every op runs immediately in numpy. When a ``Tape`` is
active and at least one input participates in gradients, the op also appends
a node (output, parents, backward rule) to the tape. ``Tape.backward`` walks
the node list once in reverse execution order, which is a valid reverse
topological order by construction, and accumulates adjoints additively.

The op set is deliberately small: elementwise arithmetic, matmul, conv2d,
nearest upsampling, bilinear/trilinear grid sampling, a few activations,
softmax, reductions, concat/reshape/permute, row scatter, and fused
scaled-dot-product attention. Everything else in the package is composed
from these. Elementwise ops follow numpy broadcasting; backward rules sum
adjoints over broadcast axes.

Gradient accumulation order is fixed by the tape, so repeated runs are
bitwise identical.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "ShapeMismatch",
    "NonScalarLoss",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "upsample2x",
    "bilinear_sample_2d",
    "trilinear_sample_3d",
    "relu",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "tsum",
    "tmean",
    "concat",
    "reshape",
    "permute",
    "scatter_rows",
    "sdpa",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for an op. Carries op name and shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(msg)


class NonScalarLoss(ValueError):
    """backward() was handed something other than a scalar tensor."""


class Tensor:
    """A contiguous float64 array plus gradient bookkeeping.

    ``requires_grad`` on a leaf marks it as a differentiation target; on an
    op output it is set automatically when the op was recorded. ``grad`` is
    populated by ``Tape.backward`` and accumulates across calls until
    ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy); treat as read-only."""
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars and arrays lift to constant tensors.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False):
        return tsum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return tmean(self, axes, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


_tape_stack: list["Tape"] = []


class Tape:
    """Append-only op record; context manager that enables recording.

    Nodes are (output, parents, backward_fn) in execution order. A tensor id
    appears as an output at most once, so the reverse walk visits each node
    exactly once with its adjoint fully accumulated.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad tensor."""
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            got = getattr(getattr(loss, "data", None), "shape", type(loss).__name__)
            raise NonScalarLoss(f"backward: loss must be a scalar tensor, got shape {got}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in self._produced:
            leaves[id(loss)] = loss
        for out, parents, bwd in reversed(self.nodes):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for p, pg in zip(parents, bwd(g)):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                cur = adjoint.get(pid)
                adjoint[pid] = pg if cur is None else cur + pg
                if pid not in self._produced:
                    leaves[pid] = p
        for pid, g in adjoint.items():
            t = leaves.get(pid)
            if t is not None:
                t.grad = g if t.grad is None else t.grad + g


class no_grad:
    """Context manager that disables recording (hides any active tape)."""

    def __enter__(self):
        self._saved = _tape_stack[:]
        _tape_stack.clear()
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.extend(self._saved)


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd) -> Tensor:
    if _tape_stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = _tape_stack[-1]
        tape.nodes.append((out, parents, bwd))
        tape._produced.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("div: divisor contains zero")
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        raise ShapeMismatch("div", a.shape, b.shape) from None

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """Matrix product with leading-batch broadcasting; operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# conv2d (stride 1, odd kernel, zero padding to same size)


def _im2col(x4: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N,C,H,W] -> [N*H*W, C*kh*kw] patch matrix under same-size zero padding."""
    n, c, h, w = x4.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    # win: [N, C, H, W, kh, kw] (view); reorder so channel-major patches are rows
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * kh * kw)


def _corr2d(x4: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation of [N,C,H,W] with [F,C,kh,kw]; returns (out [N,F,H,W], cols)."""
    n, _, h, wd = x4.shape
    f, _, kh, kw = w.shape
    cols = _im2col(x4, kh, kw)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2), cols


def conv2d(x, w, bias=None) -> Tensor:
    """2-D correlation, stride 1, zero-padded to the input size.

    x: [C,H,W] or [N,C,H,W]; w: [F,C,kh,kw] with odd kh, kw; optional bias [F].
    Output matches x's batchedness with F channels.
    """
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    squeeze = x.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    if x4.ndim != 4 or w.ndim != 4 or x4.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    f, cin, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatch("conv2d", bias.shape, (f,))
    out_data, cols = _corr2d(x4, w.data)
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    n, _, h, wd = x4.shape
    if not w.requires_grad:
        cols = None  # free the patch matrix when dW is not needed
    out = Tensor(out_data[0] if squeeze else out_data)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            # full correlation with the channel-swapped, spatially-flipped kernel
            w_t = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx4, _ = _corr2d(np.ascontiguousarray(g4), w_t)
            gx = gx4[0] if squeeze else gx4
        if w.requires_grad:
            g_rows = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * h * wd, f)
            gw = (g_rows.T @ cols).reshape(f, cin, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, bwd)


# ---------------------------------------------------------------------------
# Upsampling


def upsample2x(x) -> Tensor:
    """Nearest-neighbor x2 on the trailing two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch("upsample2x", x.shape)
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1))
    h, w = x.shape[-2], x.shape[-1]

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        g = g.reshape(*g.shape[:-2], h, 2, w, 2)
        return (g.sum(axis=(-3, -1)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Grid sampling


def _prep_corner_1d(coord: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamp-to-edge corner index and fraction for one axis."""
    c = np.clip(coord, 0.0, float(size - 1))
    i0 = np.floor(c).astype(np.int64)
    np.clip(i0, 0, size - 2, out=i0)
    return i0, c - i0


def bilinear_sample_2d(grid, coords) -> Tensor:
    """Sample [C,H,W] (or [G,C,H,W]) at coords [N,2] (or [G,N,2]), clamp-to-edge.

    coords are (x, y) in grid units: x along W, y along H, pixel centers at
    integers. Returns [N,C] (or [G,N,C]). Differentiable in both the grid and
    the coordinates (coordinate gradients have kinks at integer crossings and
    at the clamped border).
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    batched = grid.ndim == 4
    gd = grid.data if batched else grid.data[None]
    cd = coords.data if batched else coords.data[None]
    if grid.ndim not in (3, 4) or cd.ndim != 3 or cd.shape[-1] != 2 or gd.shape[0] != cd.shape[0]:
        raise ShapeMismatch("bilinear_sample_2d", grid.shape, coords.shape)
    gEff, c, h, w = gd.shape
    n = cd.shape[1]
    x0, fx = _prep_corner_1d(cd[..., 0], w)
    y0, fy = _prep_corner_1d(cd[..., 1], h)
    flat = gd.reshape(gEff, c, h * w)
    i00 = y0 * w + x0
    corners = []  # (values [G,C,N], weight [G,N], flat index [G,N]) per corner
    for dy, dx, wt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        idx = i00 + dy * w + dx
        vals = np.stack([flat[g][:, idx[g]] for g in range(gEff)])
        corners.append((vals, wt, idx))
    out_data = np.zeros((gEff, n, c))
    for vals, wt, _ in corners:
        out_data += vals.transpose(0, 2, 1) * wt[..., None]
    out = Tensor(out_data if batched else out_data[0])

    def bwd(g):
        g3 = g if batched else g[None]  # [G,N,C]
        ggrid = gcoords = None
        if grid.requires_grad:
            acc = np.zeros(gEff * h * w * c)
            ch_off = np.arange(c, dtype=np.int64)
            for gi in range(gEff):
                base = gi * h * w * c
                for _, wt, idx in corners:
                    keys = (base + idx[gi][:, None] * c + ch_off).ravel()
                    vals = (wt[gi][:, None] * g3[gi]).ravel()
                    acc += np.bincount(keys, vals, minlength=acc.size)
            ggrid = acc.reshape(gEff, h, w, c).transpose(0, 3, 1, 2)
            if not batched:
                ggrid = ggrid[0]
        if coords.requires_grad:
            (v00, _, _), (v01, _, _), (v10, _, _), (v11, _, _) = corners
            dvdx = (v01 - v00) * (1 - fy)[:, None, :] + (v11 - v10) * fy[:, None, :]
            dvdy = (v10 - v00) * (1 - fx)[:, None, :] + (v11 - v01) * fx[:, None, :]
            gx = (dvdx.transpose(0, 2, 1) * g3).sum(axis=-1)
            gy = (dvdy.transpose(0, 2, 1) * g3).sum(axis=-1)
            gcoords = np.stack([gx, gy], axis=-1)
            if not batched:
                gcoords = gcoords[0]
        return (ggrid, gcoords)

    return _record(out, (grid, coords), bwd)


def trilinear_sample_3d(grid, coords) -> Tensor:
    """Sample [C,D,H,W] at coords [N,3] = (x,y,z) grid units, clamp-to-edge.

    x indexes W, y indexes H, z indexes D. Returns [N,C]; differentiable in
    grid and coordinates.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.ndim != 4 or coords.ndim != 2 or coords.shape[-1] != 3:
        raise ShapeMismatch("trilinear_sample_3d", grid.shape, coords.shape)
    c, d, h, w = grid.shape
    x0, fx = _prep_corner_1d(coords.data[:, 0], w)
    y0, fy = _prep_corner_1d(coords.data[:, 1], h)
    z0, fz = _prep_corner_1d(coords.data[:, 2], d)
    flat = grid.data.reshape(c, d * h * w)
    corners = []
    for dz in (0, 1):
        wz = fz if dz else (1 - fz)
        for dy in (0, 1):
            wy = fy if dy else (1 - fy)
            for dx in (0, 1):
                wx = fx if dx else (1 - fx)
                idx = ((z0 + dz) * h + (y0 + dy)) * w + (x0 + dx)
                corners.append((flat[:, idx], wx * wy * wz, idx, (dx, dy, dz)))
    n = coords.shape[0]
    out_data = np.zeros((n, c))
    for vals, wt, _, _ in corners:
        out_data += vals.T * wt[:, None]
    out = Tensor(out_data)

    def bwd(g):
        ggrid = gcoords = None
        if grid.requires_grad:
            acc = np.zeros(d * h * w * c)
            ch_off = np.arange(c, dtype=np.int64)
            for _, wt, idx, _ in corners:
                keys = (idx[:, None] * c + ch_off).ravel()
                acc += np.bincount(keys, (wt[:, None] * g).ravel(), minlength=acc.size)
            ggrid = acc.reshape(d, h, w, c).transpose(3, 0, 1, 2)
        if coords.requires_grad:
            gx = np.zeros(n)
            gy = np.zeros(n)
            gz = np.zeros(n)
            gdotv = [(g * vals.T).sum(axis=1) for vals, _, _, _ in corners]
            for (vals, _, _, (dx, dy, dz)), dv in zip(corners, gdotv):
                wx = fx if dx else (1 - fx)
                wy = fy if dy else (1 - fy)
                wz = fz if dz else (1 - fz)
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                sz = 1.0 if dz else -1.0
                gx += dv * sx * wy * wz
                gy += dv * wx * sy * wz
                gz += dv * wx * wy * sz
            gcoords = np.stack([gx, gy, gz], axis=-1)
        return (ggrid, gcoords)

    return _record(out, (grid, coords), bwd)


# ---------------------------------------------------------------------------
# Activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_raw(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y) if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid_raw(x.data)
    out = Tensor(x.data * s)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _record(out, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g * y if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))

    def bwd(g):
        return (g / x.data if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if axis != -1:
        raise ValueError("softmax: only axis=-1 is supported")
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    y = shifted
    out = Tensor(y)

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tsum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    out = Tensor(x.data.sum(axis=ax, keepdims=keepdims))

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        if not keepdims:
            shape = list(x.shape)
            for a in ax:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), bwd)


def tmean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    count = 1
    for a in ax:
        count *= x.shape[a]
    out = Tensor(x.data.mean(axis=ax, keepdims=keepdims))

    def bwd(g):
        if not x.requires_grad:
            return (None,)
        g = g / count
        if not keepdims:
            shape = list(x.shape)
            for a in ax:
                shape[a] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Structure ops


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty tensor list")
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in ts]) from None
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        sl = [slice(None)] * g.ndim
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl[ax] = slice(a, b)
                pieces.append(np.ascontiguousarray(g[tuple(sl)]))
            else:
                pieces.append(None)
        return tuple(pieces)

    return _record(out, tuple(ts), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, tuple(shape)) from None
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig) if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch("permute", x.shape, axes)
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)) if x.requires_grad else None,)

    return _record(out, (x,), bwd)


def scatter_rows(x, indices, length: int) -> Tensor:
    """Place rows of x at the given unique row indices of a zero [length,...] output."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatch("scatter_rows", x.shape, idx.shape)
    out_data = np.zeros((length,) + x.shape[1:])
    out_data[idx] = x.data
    out = Tensor(out_data)

    def bwd(g):
        return (np.ascontiguousarray(g[idx]) if x.requires_grad else None,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Fused scaled-dot-product attention


def sdpa(q, k, v) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v with hand-derived backward.

    q: [..., N, d]; k: [..., M, d]; v: [..., M, dv]; leading batch dims must
    match exactly. The softmax matrix is cached for backward.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    ok = (
        q.ndim >= 2
        and q.ndim == k.ndim == v.ndim
        and q.shape[:-2] == k.shape[:-2] == v.shape[:-2]
        and q.shape[-1] == k.shape[-1]
        and k.shape[-2] == v.shape[-2]
    )
    if not ok:
        raise ShapeMismatch("sdpa", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    p *= scale
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = Tensor(np.matmul(p, v.data))

    def bwd(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.matmul(np.swapaxes(p, -1, -2), g)
        if q.requires_grad or k.requires_grad:
            ds = np.matmul(g, np.swapaxes(v.data, -1, -2))
            ds -= (ds * p).sum(axis=-1, keepdims=True)
            ds *= p
            ds *= scale
            if q.requires_grad:
                gq = np.matmul(ds, k.data)
            if k.requires_grad:
                gk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return (gq, gk, gv)

    return _record(out, (q, k, v), bwd)
