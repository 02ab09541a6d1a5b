"""Tri-plane feature fields: projection from volumes, upsampling, queries.

A tri-plane stores features on three orthogonal planes, kept in one tensor
of shape [C, 3, R, R] with plane order (xy, xz, yz). The field's domain is
the scene cube [-0.5, 0.5]^3; a world coordinate c maps to the plane grid
coordinate (c + 0.5) * (R - 1). Queries sum the three bilinear samples.

Volumes are [C, D, H, W] with D indexing world z, H indexing y, W indexing
x, matching the lifting module's layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from liftview import tensor as T
from liftview.nn import Conv2d, Linear, Module, from_tokens, to_tokens
from liftview.tensor import Tensor

_DOMAIN_TOL = 1e-9


class OutsideDomainError(ValueError):
    """A query point lies outside the scene cube by more than 1e-9."""


@dataclass
class TriPlane:
    """Feature planes [C, 3, R, R], order (xy, xz, yz)."""

    planes: Tensor

    def __post_init__(self):
        s = self.planes.shape
        if len(s) != 4 or s[1] != 3 or s[2] != s[3]:
            raise ValueError(f"TriPlane: planes must be [C, 3, R, R], got {s}")

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def resolution(self) -> int:
        return self.planes.shape[2]


class PlaneProjector(Module):
    """Volume -> TriPlane: mean over the collapsed axis, then per-plane 1x1 conv.

    The convs start as the identity map, so an untrained projector reproduces
    the plain mean projections.
    """

    def __init__(self, channels: int):
        eye = np.eye(channels).reshape(channels, channels, 1, 1)
        rng = np.random.default_rng(0)  # unused: weights are set explicitly
        self.conv_xy = Conv2d(channels, channels, 1, rng, zero_init=True)
        self.conv_xz = Conv2d(channels, channels, 1, rng, zero_init=True)
        self.conv_yz = Conv2d(channels, channels, 1, rng, zero_init=True)
        for conv in (self.conv_xy, self.conv_xz, self.conv_yz):
            conv.weight.data = eye.copy()

    def __call__(self, volume: Tensor) -> TriPlane:
        if volume.ndim != 4:
            raise ValueError(f"PlaneProjector: volume must be [C,D,H,W], got {volume.shape}")
        c, d, h, w = volume.shape
        if not (d == h == w):
            raise ValueError(f"PlaneProjector: volume must be cubic, got {d}x{h}x{w}")
        xy = self.conv_xy(T.tmean(volume, axes=1))  # collapse z -> [C, y, x]
        xz = self.conv_xz(T.tmean(volume, axes=2))  # collapse y -> [C, z, x]
        yz = self.conv_yz(T.tmean(volume, axes=3))  # collapse x -> [C, z, y]
        stacked = T.concat([
            T.reshape(xy, (c, 1, h, w)),
            T.reshape(xz, (c, 1, d, w)),
            T.reshape(yz, (c, 1, d, h)),
        ], axis=1)
        return TriPlane(stacked)


def volume_to_planes(volume: Tensor, projector: PlaneProjector) -> TriPlane:
    return projector(volume)


# ---------------------------------------------------------------------------
# Queries


def _coord_selectors(res: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = float(res - 1)
    m_xy = np.array([[s, 0.0], [0.0, s], [0.0, 0.0]])  # (col, row) = (x, y)
    m_xz = np.array([[s, 0.0], [0.0, 0.0], [0.0, s]])  # (x, z)
    m_yz = np.array([[0.0, 0.0], [s, 0.0], [0.0, s]])  # (y, z)
    return m_xy, m_xz, m_yz


def query(tp: TriPlane, points) -> Tensor:
    """Field features at world points [N, 3]: sum of the three plane samples.

    Differentiable in both the planes and the points. Points more than 1e-9
    outside the cube raise OutsideDomainError.
    """
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
    if pts.ndim == 1:
        pts = T.reshape(pts, (1, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"query: points must be [N, 3], got {pts.shape}")
    worst = float(np.abs(pts.data).max(initial=0.0))
    if worst > 0.5 + _DOMAIN_TOL:
        raise OutsideDomainError(
            f"query: point outside the scene cube (max |coord| = {worst:.6g} > 0.5)")
    n = pts.shape[0]
    res = tp.resolution
    shifted = T.add(pts, 0.5)
    m_xy, m_xz, m_yz = _coord_selectors(res)
    coords = T.concat([
        T.matmul(shifted, Tensor(m_xy)),
        T.matmul(shifted, Tensor(m_xz)),
        T.matmul(shifted, Tensor(m_yz)),
    ], axis=0)
    coords3 = T.reshape(coords, (3, n, 2))
    grids = T.permute(tp.planes, (1, 0, 2, 3))
    sampled = T.bilinear_sample_2d(grids, coords3)  # [3, N, C]
    return T.tsum(sampled, axes=0)


# ---------------------------------------------------------------------------
# Upsampling


def _keys_weight(d: float) -> float:
    # Keys cubic kernel, a = -0.5
    d = abs(d)
    if d <= 1.0:
        return 1.5 * d ** 3 - 2.5 * d ** 2 + 1.0
    if d < 2.0:
        return -0.5 * (d ** 3 - 5.0 * d ** 2 + 8.0 * d - 4.0)
    return 0.0


def _bicubic_matrix(n: int) -> np.ndarray:
    """[2n, n] matrix applying x2 bicubic (half-pixel phase, edge clamp).

    Every row sums to exactly 1.0: the four tap weights are dyadic rationals
    summing to one, and clamping only merges taps.
    """
    u = np.zeros((2 * n, n))
    for i_out in range(2 * n):
        src = (i_out + 0.5) / 2.0 - 0.5
        base = math.floor(src)
        for tap in range(-1, 3):
            j = base + tap
            u[i_out, min(max(j, 0), n - 1)] += _keys_weight(src - j)
    return u


class _UpsamplerBlock(Module):
    """Residual conv pair -> x2 nearest upsample -> residual conv (-> attention).

    Every learned branch ends in a zero-initialized map, so a fresh block is
    exactly nearest-neighbor x2 upsampling.
    """

    def __init__(self, channels: int, with_attention: bool, rng: np.random.Generator):
        self.res_in = Conv2d(channels, channels, 3, rng)
        self.res_out = Conv2d(channels, channels, 3, rng, zero_init=True)
        self.post = Conv2d(channels, channels, 3, rng, zero_init=True)
        self.attn_q = Linear(channels, channels, rng, bias=False) if with_attention else None
        self.attn_k = Linear(channels, channels, rng, bias=False) if with_attention else None
        self.attn_v = Linear(channels, channels, rng, bias=False) if with_attention else None
        self.attn_proj = Linear(channels, channels, rng, zero_init=True) if with_attention else None

    def __call__(self, x: Tensor) -> Tensor:
        # x: [3, C, H, W], the three planes batched through shared weights
        x = T.add(x, self.res_out(T.silu(self.res_in(x))))
        x = T.upsample2x(x)
        x = T.add(x, self.post(T.silu(x)))
        if self.attn_q is not None:
            g, c, h, w = x.shape
            tokens = T.permute(T.reshape(x, (g, c, h * w)), (0, 2, 1))  # [3, HW, C]
            att = T.sdpa(self.attn_q(tokens), self.attn_k(tokens), self.attn_v(tokens))
            upd = T.permute(self.attn_proj(att), (0, 2, 1))
            x = T.add(x, T.reshape(upd, (g, c, h, w)))
        return x


class PlaneUpsampler(Module):
    """Stack of upsampler blocks shared across the three planes.

    Spatial self-attention sits in the final block only (it is quadratic in
    token count); set attention_every_block to pay for it everywhere.
    """

    def __init__(self, channels: int, n_blocks: int, rng: np.random.Generator,
                 attention_every_block: bool = False):
        self.channels = channels
        self.blocks = [
            _UpsamplerBlock(channels, attention_every_block or i == n_blocks - 1, rng)
            for i in range(n_blocks)
        ]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def __call__(self, planes: Tensor) -> Tensor:
        x = T.permute(planes, (1, 0, 2, 3))  # [3, C, R, R]
        for block in self.blocks:
            x = block(x)
        return T.permute(x, (1, 0, 2, 3))


def upsample_planes(tp: TriPlane, target_resolution: int, mode: str = "learned",
                    upsampler: PlaneUpsampler | None = None) -> TriPlane:
    """Upsample to target_resolution, which must be res * 2^k for some k >= 0.

    "learned" runs the given PlaneUpsampler (whose block count must match k);
    "bicubic" applies fixed Keys interpolation per doubling, anchored on the
    per-plane mean so constant planes are preserved bit-for-bit.
    """
    res = tp.resolution
    if target_resolution < res or target_resolution % res:
        raise ValueError(
            f"upsample_planes: cannot reach {target_resolution} from {res}; "
            f"the factor must be a power of two")
    factor = target_resolution // res
    k = factor.bit_length() - 1
    if 2 ** k != factor:
        raise ValueError(
            f"upsample_planes: factor {factor} is not a power of two "
            f"({res} -> {target_resolution})")
    if mode == "learned":
        if upsampler is None:
            raise ValueError("upsample_planes: learned mode needs an upsampler")
        if upsampler.n_blocks != k:
            raise ValueError(
                f"upsample_planes: upsampler has {upsampler.n_blocks} blocks, "
                f"target needs {k}")
        if upsampler.channels != tp.channels:
            raise ValueError(
                f"upsample_planes: upsampler channels {upsampler.channels} != "
                f"plane channels {tp.channels}")
        return TriPlane(upsampler(tp.planes))
    if mode != "bicubic":
        raise ValueError(f"upsample_planes: unknown mode {mode!r}")
    planes = tp.planes
    anchor = T.tmean(planes, axes=(2, 3), keepdims=True)
    x = T.sub(planes, anchor)
    r = res
    while r < target_resolution:
        u = Tensor(_bicubic_matrix(r))
        ut = Tensor(_bicubic_matrix(r).T.copy())
        x = T.matmul(T.matmul(u, x), ut)
        r *= 2
    return TriPlane(T.add(x, anchor))
