"""End-to-end differentiation chains for the gradient suite.

Each case wires several modules into one scalar-valued function of a single
input tensor, at the smallest sizes the shape contracts allow, so the
finite-difference checker can afford to probe every coordinate.
"""

from __future__ import annotations

import numpy as np

from .camera import look_at
from .diffusion import Denoiser, diffusion_loss, linear_schedule
from .lifting import FeatureExtractor, ViewAggregator, aggregate_views, \
    extract_features, lift_view
from .losses import LossConfig, recon_loss
from .renderer import FieldDecoder, render
from .tensor import Tensor
from .triplane import PlaneProjector


def _recon_path(seed: int):
    """image -> lift -> aggregate -> tri-plane -> render -> recon_loss."""
    rng = np.random.default_rng(seed)
    c = 4
    extractor = FeatureExtractor(c_feat=c, c_mid=c, rng=rng)
    aggregator = ViewAggregator(c, 4, rng=rng)
    projector = PlaneProjector(c)
    decoder = FieldDecoder(in_channels=c, hidden=8, feature_channels=c, rng=rng)
    pose = look_at((1.2, 0.35, 0.3), fx=3.6, fy=3.6, cx=1.5, cy=1.5,
                   width=4, height=4)
    target = Tensor(rng.random((3, 4, 4)))
    loss_cfg = LossConfig(lambda_perc=0.1, pyramid_levels=2)

    def f(image: Tensor) -> Tensor:
        feats = extract_features(image, extractor)
        volume = aggregate_views([lift_view(feats, pose, (c, 4, 4, 4))],
                                 aggregator)
        tp = projector(volume.data)
        out = render(tp, decoder, pose, n_samples=4, seed=None)
        return recon_loss(out.image, target, loss_cfg)

    x = Tensor(0.2 + 0.6 * rng.random((3, 4, 4)), requires_grad=True)
    return f, x, 1e-3


def _diffusion_path(seed: int):
    """x0 -> add_noise -> denoiser -> diffusion_loss."""
    rng = np.random.default_rng(1000 + seed)
    denoiser = Denoiser(cond_channels=4, embed_dim=4, base=4, t_dim=4, rng=rng)
    # Zero-initialized heads would zero the whole gradient; nudge them.
    for p in denoiser.params().values():
        if not np.any(p.data):
            p.data = rng.normal(0.0, 0.05, p.data.shape)
    schedule = linear_schedule(10)
    cond_feature = Tensor(rng.standard_normal((4, 4, 4)))
    cond_embedding = Tensor(rng.standard_normal(4))

    def f(x0: Tensor) -> Tensor:
        draw = np.random.default_rng(31 * seed + 7)
        return diffusion_loss(x0, cond_feature, cond_embedding, denoiser,
                              schedule, draw, p_uncond=0.5)

    x = Tensor(rng.random((3, 4, 4)), requires_grad=True)
    return f, x, 1e-4


def cases() -> list[tuple[str, object]]:
    return [
        ("composite_recon_render", _recon_path),
        ("composite_diffusion", _diffusion_path),
    ]


__all__ = ["cases"]
