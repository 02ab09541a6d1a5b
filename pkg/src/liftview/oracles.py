"""Brute-force oracles exposed to the CLI health checks.

Each oracle recomputes a pipeline quantity with plain scalar loops or direct
algebra, fully independent of the tensor engine's vectorized paths, and
returns the worst observed error.
"""

from __future__ import annotations

import numpy as np

from .diffusion import ddim_sample, linear_schedule
from .renderer import composite
from .tensor import Tensor


def _composite_scalar(sigma, rgb, delta, background):
    """Per-sample alpha compositing, one float at a time."""
    import math
    trans = 1.0
    color = [0.0, 0.0, 0.0]
    wsum = 0.0
    for i in range(len(sigma)):
        alpha = 1.0 - math.exp(-sigma[i] * delta[i])
        weight = trans * alpha
        for k in range(3):
            color[k] += weight * rgb[i][k]
        wsum += weight
        trans *= 1.0 - alpha
    for k in range(3):
        color[k] += (1.0 - wsum) * background[k]
    return color, wsum


def compositing_error(n_configs: int = 100, seed: int = 0) -> float:
    """Max |vectorized - scalar-loop| over random (sigma, color, delta) runs.

    Also enforces weight sums in [0, 1]; a violation is reported as inf.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        s = int(rng.integers(1, 9))
        sigma = rng.uniform(0.0, 30.0, s)
        rgb = rng.random((s, 3))
        delta = rng.uniform(0.005, 0.2, s)
        background = rng.random(3)
        color, _, wsum = composite(Tensor(sigma[None]), Tensor(rgb[None]),
                                   None, delta[None], background)
        ref_color, ref_wsum = _composite_scalar(sigma, rgb, delta, background)
        got_wsum = float(wsum.data[0])
        if not 0.0 <= got_wsum <= 1.0 + 1e-12:
            return float("inf")
        worst = max(worst, abs(got_wsum - ref_wsum),
                    float(np.abs(color.data[0] - np.asarray(ref_color)).max()))
    return worst


def ddim_inversion_error(n_pairs: int = 20, seed: int = 0,
                         steps: int = 100) -> float:
    """Max |recovered - x0| over full-range DDIM jumps with an exact-noise
    oracle denoiser; exercises the sampler's update algebra."""
    rng = np.random.default_rng(seed)
    schedule = linear_schedule(steps)
    cond_feature = Tensor(np.zeros((1, 4, 4)))
    cond_embedding = Tensor(np.zeros(1))
    worst = 0.0
    for _ in range(n_pairs):
        x0 = rng.random((3, 4, 4))
        eps = rng.standard_normal((3, 4, 4))
        a = schedule.signal_fraction(schedule.steps)
        x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps

        def oracle(xt, t, cf, ce, dropped, _eps=eps):
            return Tensor(_eps)

        rec = ddim_sample(cond_feature, cond_embedding, oracle, schedule,
                          n_steps=1, guidance_w=1.0, x_init=x_t, clamp=False)
        worst = max(worst, float(np.abs(rec.data - x0).max()))
    return worst


def guidance_collapse_exact(seed: int = 0) -> bool:
    """At guidance weight 1 the sample must equal the conditional-only
    path bitwise (the unconditional branch must not even be evaluated)."""
    rng = np.random.default_rng(seed)
    schedule = linear_schedule(50)
    cond_feature = Tensor(rng.standard_normal((2, 4, 4)))
    cond_embedding = Tensor(rng.standard_normal(2))
    calls = []

    def denoiser(xt, t, cf, ce, dropped):
        calls.append(dropped)
        mix = 0.3 if dropped else 0.1
        return Tensor(np.tanh(xt.data * mix) + (0.5 if dropped else 0.0))

    a = ddim_sample(cond_feature, cond_embedding, denoiser, schedule,
                    n_steps=5, guidance_w=1.0, seed=3)
    if any(calls):
        return False

    def cond_only(xt, t, cf, ce, dropped):
        return Tensor(np.tanh(xt.data * 0.1))

    b = ddim_sample(cond_feature, cond_embedding, cond_only, schedule,
                    n_steps=5, guidance_w=1.0, seed=3)
    return bool(np.array_equal(a.data, b.data))
