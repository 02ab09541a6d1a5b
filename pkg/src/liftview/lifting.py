"""Image features lifted into a shared voxel volume.

Per view: a small conv encoder turns the image into a half-resolution
feature map; every voxel center of the scene cube is projected into the
view and bilinearly samples the map (align-corners coordinate scaling),
voxels behind the camera or off-image get zeros and a zero hit count.
Multiple lifted volumes are fused per voxel by attention pooling with one
learned query, followed by a light refinement net.

Views are sorted by a content hash before pooling, so aggregation is
bitwise permutation-invariant even though float sums depend on order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from liftview import tensor as T
from liftview.camera import CameraPose, project_with_depth
from liftview.nn import Conv2d, Linear, Module, avgpool2x
from liftview.tensor import Tensor

_MASKED_LOGIT = -1e30


@dataclass
class FeatureVolume:
    """Voxel features [C, D, H, W] plus per-voxel view-hit counts [D, H, W].

    Voxel (iz, iy, ix) is centered at ((ix+0.5)/W - 0.5, (iy+0.5)/H - 0.5,
    (iz+0.5)/D - 0.5) in world coordinates.
    """

    data: Tensor
    hits: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"FeatureVolume: data must be [C,D,H,W], got {self.data.shape}")
        if tuple(self.hits.shape) != tuple(self.data.shape[1:]):
            raise ValueError(
                f"FeatureVolume: hits {self.hits.shape} does not match data {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


class FeatureExtractor(Module):
    """Image [3, H, W] -> feature map [c_feat, H/2, W/2].

    conv -> silu -> 2x2 mean pool -> conv. With zero_init_final the second
    conv starts at zero, making the initial feature map identically zero.
    """

    def __init__(self, c_feat: int = 16, c_mid: int = 16,
                 rng: np.random.Generator | None = None,
                 zero_init_final: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv_in = Conv2d(3, c_mid, 3, rng)
        self.conv_out = Conv2d(c_mid, c_feat, 3, rng, zero_init=zero_init_final)
        self.c_feat = c_feat

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"extract_features: image must be [3,H,W], got {image.shape}")
        if image.shape[1] % 2 or image.shape[2] % 2:
            raise ValueError(
                f"extract_features: image size {image.shape[1]}x{image.shape[2]} must be even")
        h = avgpool2x(T.silu(self.conv_in(image)))
        return self.conv_out(h)


def extract_features(image: Tensor, extractor: FeatureExtractor) -> Tensor:
    return extractor(image)


def voxel_centers(dims: tuple[int, int, int]) -> np.ndarray:
    """World coordinates [D*H*W, 3] of voxel centers, (x, y, z) columns."""
    d, h, w = dims
    iz, iy, ix = np.meshgrid(np.arange(d), np.arange(h), np.arange(w),
                             indexing="ij")
    x = (ix.ravel() + 0.5) / w - 0.5
    y = (iy.ravel() + 0.5) / h - 0.5
    z = (iz.ravel() + 0.5) / d - 0.5
    return np.stack([x, y, z], axis=1)


def lift_view(features: Tensor, pose: CameraPose,
              dims: tuple[int, int, int, int]) -> FeatureVolume:
    """Unproject one view's feature map into a [C, D, H, W] volume.

    Feature-map pixels are aligned to the image corners: image pixel u maps
    to feature coordinate u * (w_f - 1) / (w_img - 1). Linear in the feature
    map, differentiable through the bilinear reads.
    """
    c, d, h, w = dims
    if features.ndim != 3 or features.shape[0] != c:
        raise ValueError(
            f"lift_view: feature map {features.shape} does not provide {c} channels")
    centers = voxel_centers((d, h, w))
    uv, depth = project_with_depth(pose, centers)
    in_view = ((depth > 1e-9)
               & (uv[:, 0] >= 0.0) & (uv[:, 0] <= pose.width - 1.0)
               & (uv[:, 1] >= 0.0) & (uv[:, 1] <= pose.height - 1.0))
    n = centers.shape[0]
    hits = in_view.astype(np.int64).reshape(d, h, w)
    idx = np.nonzero(in_view)[0]
    if idx.size == 0:
        return FeatureVolume(Tensor(np.zeros((c, d, h, w))), hits)
    fh, fw = features.shape[1], features.shape[2]
    scale = np.array([(fw - 1.0) / (pose.width - 1.0),
                      (fh - 1.0) / (pose.height - 1.0)])
    coords = uv[idx] * scale
    sampled = T.bilinear_sample_2d(features, Tensor(coords))  # [n_in, C]
    full = T.scatter_rows(sampled, idx, n)
    vol = T.permute(T.reshape(full, (d, h, w, c)), (3, 0, 1, 2))
    return FeatureVolume(vol, hits)


class ViewAggregator(Module):
    """Per-voxel attention pooling over views plus a refinement net.

    Keys are a learned projection of each view's voxel feature; the query is
    a single learned vector; values are the raw features, so attention over
    identical views reproduces their feature exactly. The refinement adds a
    residual branch (shared per-depth-slice conv, then a zero-initialized
    channel-and-depth mixing matrix), so a fresh aggregator is plain pooling.
    """

    def __init__(self, channels: int, depth: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.query = Tensor(rng.normal(0.0, channels ** -0.5, size=(channels, 1)),
                            requires_grad=True)
        self.key_proj = Linear(channels, channels, rng, bias=False)
        self.slice_conv = Conv2d(channels, channels, 3, rng)
        self.crossmix = Linear(channels * depth, channels * depth, rng,
                               zero_init=True, bias=False)
        self.channels = channels
        self.depth = depth

    def pool(self, stack: Tensor, mask: np.ndarray) -> Tensor:
        """Attend over views: [V, C, N] + bool mask [V, N] -> [C, N]."""
        v, c, n = stack.shape
        tokens = T.permute(stack, (2, 0, 1))  # [N, V, C]
        keys = self.key_proj(tokens)
        logits = T.reshape(T.matmul(keys, T.mul(self.query, c ** -0.5)), (n, v))
        penalty = np.where(mask.T, 0.0, _MASKED_LOGIT)
        att = T.softmax(T.add(logits, Tensor(penalty)))
        pooled = T.tsum(T.mul(T.reshape(att, (n, v, 1)), tokens), axes=1)
        return T.permute(pooled, (1, 0))  # [C, N]

    def refine(self, vol: Tensor) -> Tensor:
        c, d, h, w = vol.shape
        slices = T.permute(vol, (1, 0, 2, 3))  # depth as batch
        mixed = T.silu(self.slice_conv(slices))
        tokens = T.permute(T.reshape(T.permute(mixed, (1, 0, 2, 3)),
                                     (c * d, h * w)), (1, 0))
        update = T.permute(self.crossmix(tokens), (1, 0))
        return T.add(vol, T.reshape(update, (c, d, h, w)))


def aggregate_views(volumes: list[FeatureVolume],
                    aggregator: ViewAggregator) -> FeatureVolume:
    """Fuse per-view volumes into one; voxels no view saw stay exactly zero."""
    if not volumes:
        raise ValueError("aggregate_views: need at least one volume")
    dims = volumes[0].data.shape
    for vol in volumes[1:]:
        if vol.data.shape != dims:
            raise ValueError(
                f"aggregate_views: mixed volume shapes {dims} vs {vol.data.shape}")
    c, d, h, w = dims
    if c != aggregator.channels or d != aggregator.depth:
        raise ValueError(
            f"aggregate_views: aggregator built for C={aggregator.channels}, "
            f"D={aggregator.depth}, volumes are C={c}, D={d}")
    order = sorted(
        range(len(volumes)),
        key=lambda i: hashlib.sha256(
            volumes[i].data.data.tobytes() + volumes[i].hits.tobytes()).digest())
    n = d * h * w
    stack = T.concat([T.reshape(volumes[i].data, (1, c, n)) for i in order], axis=0)
    mask = np.stack([volumes[i].hits.reshape(n) > 0 for i in order])
    pooled = aggregator.pool(stack, mask)
    vol = T.reshape(pooled, (c, d, h, w))
    refined = aggregator.refine(vol)
    hits = sum(v.hits for v in volumes)
    seen = Tensor((hits > 0).astype(np.float64))
    return FeatureVolume(T.mul(refined, seen), hits)
