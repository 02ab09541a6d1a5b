"""Conditional denoising diffusion over rendered views.

Implements the second training stage: forward noising of a target image, a
small U-shaped noise predictor conditioned on a rendered feature map and a
global embedding of the input view, the training objective, and deterministic
DDIM sampling with classifier-free guidance.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, avgpool2x, channel_affine, from_tokens, \
    sinusoidal_embedding, to_tokens
from .tensor import Tensor, as_tensor, no_grad


# ---------------------------------------------------------------------------
# Noise schedule


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: per-step betas and their running products.

    ``alpha_bars[i]`` is the signal fraction after step ``i + 1``; timesteps
    are 1-indexed everywhere in this module.
    """

    steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.shape != (self.steps,) or abars.shape != (self.steps,):
            raise ValueError("NoiseSchedule: arrays must have length == steps")
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ValueError("NoiseSchedule: betas must lie in (0, 1)")
        if not np.allclose(abars, np.cumprod(1.0 - betas), rtol=0.0, atol=1e-12):
            raise ValueError("NoiseSchedule: alpha_bars inconsistent with betas")
        if not np.all(np.diff(abars) < 0.0):
            raise ValueError("NoiseSchedule: alpha_bars must strictly decrease")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    def signal_fraction(self, t: int) -> float:
        """ᾱ at 1-indexed step t; t = 0 denotes the clean image (ᾱ = 1)."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"NoiseSchedule: step {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def linear_schedule(steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, steps)
    return NoiseSchedule(steps, betas, np.cumprod(1.0 - betas))


def add_noise(x0, t: int, eps, schedule: NoiseSchedule) -> Tensor:
    """Noisy image at step t: √ᾱ_t · x0 + √(1−ᾱ_t) · eps."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if eps.shape != x0.shape:
        raise T.ShapeMismatch("add_noise", x0.shape, eps.shape)
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"add_noise: t={t} outside [1, {schedule.steps}]")
    a = schedule.signal_fraction(t)
    return T.add(T.mul(x0, math.sqrt(a)), T.mul(eps, math.sqrt(1.0 - a)))


# ---------------------------------------------------------------------------
# Conditioning inputs


@dataclasses.dataclass
class DenoiserInput:
    """One denoiser evaluation: noisy image, step, and both conditions."""

    x_t: Tensor
    t: int
    cond_feature: Tensor
    cond_embedding: Tensor
    cond_dropped: bool = False


class ViewEncoder(Module):
    """Global embedding of an input view [3,H,W] -> [E].

    Stands in for a pretrained image encoder: two conv stages with a 2x
    pool between them, then a global spatial mean.
    """

    def __init__(self, embed_dim: int = 16,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.embed_dim = embed_dim
        self.conv_in = Conv2d(3, embed_dim, 3, rng)
        self.conv_out = Conv2d(embed_dim, embed_dim, 3, rng)

    def __call__(self, image) -> Tensor:
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise T.ShapeMismatch("ViewEncoder", image.shape)
        h = avgpool2x(T.silu(self.conv_in(image)))
        h = T.silu(self.conv_out(h))
        return T.tmean(h, axes=(1, 2))


class _StageCond(Module):
    """Per-stage conditioning: timestep bias plus embedding-driven affine.

    The gain and shift projections start at zero so the stage is initially
    an identity on its feature map (plus the timestep bias).
    """

    def __init__(self, channels: int, t_dim: int, embed_dim: int,
                 rng: np.random.Generator):
        self.channels = channels
        self.t_proj = Linear(t_dim, channels, rng)
        self.gain = Linear(embed_dim, channels, rng, zero_init=True)
        self.shift = Linear(embed_dim, channels, rng, zero_init=True)

    def __call__(self, h: Tensor, t_emb: Tensor, embed: Tensor) -> Tensor:
        # Row-vector shapes keep the projections inside matmul's 2-D contract.
        t_row = T.reshape(t_emb, (1, t_emb.shape[0]))
        e_row = T.reshape(embed, (1, embed.shape[0]))
        c = self.channels
        scale = T.add(T.reshape(self.gain(e_row), (c,)), 1.0)
        shift = T.add(T.reshape(self.shift(e_row), (c,)),
                      T.reshape(self.t_proj(t_row), (c,)))
        return channel_affine(h, scale, shift)


class Denoiser(Module):
    """U-shaped noise predictor over concat(x_t, cond_feature).

    Two downsample stages, a bottleneck with one self-attention layer, and
    skip connections back up. Every stage receives a sinusoidal timestep
    bias and an affine modulation from the global input-view embedding;
    dropping the conditions swaps in learned null tokens. The output conv
    is zero-initialized, so a fresh model predicts zero noise.
    """

    def __init__(self, cond_channels: int = 16, embed_dim: int = 16,
                 base: int = 32, t_dim: int = 32,
                 rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        if t_dim % 2:
            raise ValueError("Denoiser: t_dim must be even")
        self.cond_channels = cond_channels
        self.embed_dim = embed_dim
        self.t_dim = t_dim
        b = base

        self.stem = Conv2d(3 + cond_channels, b, 3, rng)
        self.enc1 = Conv2d(b, b, 3, rng)
        self.enc2 = Conv2d(b, 2 * b, 3, rng)
        self.mid_in = Conv2d(2 * b, 2 * b, 3, rng)
        self.attn_q = Linear(2 * b, 2 * b, rng, bias=False)
        self.attn_k = Linear(2 * b, 2 * b, rng, bias=False)
        self.attn_v = Linear(2 * b, 2 * b, rng, bias=False)
        self.attn_proj = Linear(2 * b, 2 * b, rng, zero_init=True, bias=False)
        self.mid_out = Conv2d(2 * b, 2 * b, 3, rng)
        self.dec2 = Conv2d(4 * b, 2 * b, 3, rng)
        self.dec1 = Conv2d(3 * b, b, 3, rng)
        self.out = Conv2d(b, 3, 3, rng, zero_init=True)

        self.cond_stem = _StageCond(b, t_dim, embed_dim, rng)
        self.cond_enc1 = _StageCond(b, t_dim, embed_dim, rng)
        self.cond_enc2 = _StageCond(2 * b, t_dim, embed_dim, rng)
        self.cond_mid = _StageCond(2 * b, t_dim, embed_dim, rng)
        self.cond_dec2 = _StageCond(2 * b, t_dim, embed_dim, rng)
        self.cond_dec1 = _StageCond(b, t_dim, embed_dim, rng)

        self.null_feature = Tensor(np.zeros(cond_channels), requires_grad=True)
        self.null_embedding = Tensor(np.zeros(embed_dim), requires_grad=True)

    def __call__(self, x_t, t: int, cond_feature, cond_embedding,
                 cond_dropped: bool = False) -> Tensor:
        x_t = as_tensor(x_t)
        cond_feature = as_tensor(cond_feature)
        cond_embedding = as_tensor(cond_embedding)
        if x_t.ndim != 3 or x_t.shape[0] != 3:
            raise T.ShapeMismatch("Denoiser", x_t.shape)
        _, h, w = x_t.shape
        if h % 4 or w % 4:
            raise ValueError("Denoiser: spatial dims must be divisible by 4")
        if cond_feature.shape != (self.cond_channels, h, w):
            raise T.ShapeMismatch("Denoiser", x_t.shape, cond_feature.shape)
        if cond_embedding.shape != (self.embed_dim,):
            raise T.ShapeMismatch("Denoiser", cond_embedding.shape)
        if cond_dropped:
            zeros = Tensor(np.zeros((self.cond_channels, h, w)))
            cond_feature = T.add(T.reshape(self.null_feature,
                                           (self.cond_channels, 1, 1)), zeros)
            cond_embedding = self.null_embedding
        t_emb = Tensor(sinusoidal_embedding(t, self.t_dim))
        e = cond_embedding

        x = T.concat([x_t, cond_feature], axis=0)
        d0 = T.silu(self.cond_stem(self.stem(x), t_emb, e))
        s1 = T.silu(self.cond_enc1(self.enc1(d0), t_emb, e))
        s2 = T.silu(self.cond_enc2(self.enc2(avgpool2x(s1)), t_emb, e))
        m = T.silu(self.cond_mid(self.mid_in(avgpool2x(s2)), t_emb, e))
        tok = to_tokens(m)
        att = T.sdpa(self.attn_q(tok), self.attn_k(tok), self.attn_v(tok))
        m = T.add(m, from_tokens(self.attn_proj(att), h // 4, w // 4))
        m = T.silu(self.mid_out(m))
        c2 = self.dec2(T.concat([T.upsample2x(m), s2], axis=0))
        c2 = T.silu(self.cond_dec2(c2, t_emb, e))
        c1 = self.dec1(T.concat([T.upsample2x(c2), s1], axis=0))
        c1 = T.silu(self.cond_dec1(c1, t_emb, e))
        return self.out(c1)


def predict_eps(inp: DenoiserInput, denoiser) -> Tensor:
    return denoiser(inp.x_t, inp.t, inp.cond_feature, inp.cond_embedding,
                    inp.cond_dropped)


# ---------------------------------------------------------------------------
# Training objective


def diffusion_loss(x0, cond_feature, cond_embedding, denoiser,
                   schedule: NoiseSchedule, rng: np.random.Generator,
                   p_uncond: float = 0.1) -> Tensor:
    """Noise-prediction MSE at a uniformly drawn step.

    Draws t, Gaussian noise, and the condition-drop coin from ``rng``, so a
    seeded generator makes the loss reproducible. The mean is over elements.
    """
    x0 = as_tensor(x0)
    t = int(rng.integers(1, schedule.steps + 1))
    eps = rng.standard_normal(x0.shape)
    dropped = bool(rng.random() < p_uncond)
    x_t = add_noise(x0, t, Tensor(eps), schedule)
    e_hat = denoiser(x_t, t, cond_feature, cond_embedding, dropped)
    d = T.sub(e_hat, Tensor(eps))
    return T.tmean(T.mul(d, d))


# ---------------------------------------------------------------------------
# DDIM sampling


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def ddim_sample(cond_feature, cond_embedding, denoiser,
                schedule: NoiseSchedule, n_steps: int = 200,
                guidance_w: float = 2.0, seed: int | None = 0,
                x_init: np.ndarray | None = None, clamp: bool = True) -> Tensor:
    """Deterministic DDIM sampler with classifier-free guidance.

    Visits n_steps evenly spaced timesteps from the full-noise end down to
    step 1. At guidance weight 1 the unconditional branch is skipped and the
    guided noise equals the conditional prediction exactly. ``x_init``
    overrides the seeded Gaussian start (used by inversion tests); ``clamp``
    controls the final clip to [0, 1].
    """
    if n_steps > schedule.steps:
        raise ValueError(
            f"ddim_sample: n_steps={n_steps} exceeds schedule steps={schedule.steps}")
    if n_steps < 1:
        raise ValueError("ddim_sample: n_steps must be >= 1")
    if guidance_w < 0.0:
        raise ValueError("ddim_sample: guidance_w must be >= 0")
    cond_feature = as_tensor(cond_feature)
    cond_embedding = as_tensor(cond_embedding)
    h, w = cond_feature.shape[-2], cond_feature.shape[-1]
    if x_init is not None:
        x = np.array(x_init, dtype=np.float64)
    else:
        x = np.random.default_rng(seed).standard_normal((3, h, w))
    if x.shape != (3, h, w):
        raise T.ShapeMismatch("ddim_sample", x.shape, cond_feature.shape)

    taus = np.rint(np.linspace(schedule.steps, 1, n_steps)).astype(int)

    def eps_at(xt: np.ndarray, t: int) -> np.ndarray:
        with no_grad():
            e_c = _as_array(denoiser(Tensor(xt), t, cond_feature,
                                     cond_embedding, False))
            if guidance_w == 1.0:
                return e_c
            e_u = _as_array(denoiser(Tensor(xt), t, cond_feature,
                                     cond_embedding, True))
        return e_u + guidance_w * (e_c - e_u)

    for i, t in enumerate(taus):
        t_next = int(taus[i + 1]) if i + 1 < len(taus) else 0
        a_t = schedule.signal_fraction(int(t))
        a_n = schedule.signal_fraction(t_next)
        e = eps_at(x, int(t))
        x0_hat = (x - math.sqrt(1.0 - a_t) * e) / math.sqrt(a_t)
        x = math.sqrt(a_n) * x0_hat + math.sqrt(1.0 - a_n) * e
    if clamp:
        np.clip(x, 0.0, 1.0, out=x)
    return Tensor(x)
