"""Reconstruction loss and image metrics.

The reconstruction loss is pixel MSE plus a lightweight perceptual proxy: L1
distance between finite-difference gradients of the two images across a
3-level mean-pooled pyramid. The proxy penalizes blur and edge misalignment
the way a learned feature loss would, without any pretrained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from liftview import tensor as T
from liftview.nn import absval, avgpool2x
from liftview.tensor import Tensor

_KX = Tensor(np.array([0.0, -1.0, 1.0]).reshape(1, 1, 1, 3))
_KY = Tensor(np.array([0.0, -1.0, 1.0]).reshape(1, 1, 3, 1))

_EDGE_MASKS: dict[tuple[str, int], Tensor] = {}


def _edge_mask(axis: str, n: int) -> Tensor:
    # zero-pad convolution contaminates the trailing row/column; mask it out
    m = _EDGE_MASKS.get((axis, n))
    if m is None:
        v = np.ones(n)
        v[-1] = 0.0
        shape = (1, 1, 1, n) if axis == "x" else (1, 1, n, 1)
        m = Tensor(v.reshape(shape))
        _EDGE_MASKS[(axis, n)] = m
    return m


@dataclass(frozen=True)
class LossConfig:
    lambda_perc: float = 0.1
    pyramid_levels: int = 3


def mse(pred: Tensor, target: Tensor) -> Tensor:
    d = T.sub(pred, target)
    return T.tmean(T.mul(d, d))


def _image_gradients(img4: Tensor) -> tuple[Tensor, Tensor]:
    return T.conv2d(img4, _KX), T.conv2d(img4, _KY)


def gradient_pyramid_proxy(pred: Tensor, target: Tensor, levels: int = 3) -> Tensor:
    """Mean L1 gradient difference over a x2 mean-pooled pyramid.

    Inputs are [C, H, W]. Levels whose resolution is odd (or below the 2-pixel
    gradient support) end the pyramid early.
    """
    c, h, w = pred.shape
    p = T.reshape(pred, (c, 1, h, w))
    t = T.reshape(target, (c, 1, h, w))
    terms = []
    for level in range(levels):
        h, w = p.shape[-2], p.shape[-1]
        pgx, pgy = _image_gradients(p)
        tgx, tgy = _image_gradients(t)
        terms.append(T.tmean(absval(T.mul(T.sub(pgx, tgx), _edge_mask("x", w)))))
        terms.append(T.tmean(absval(T.mul(T.sub(pgy, tgy), _edge_mask("y", h)))))
        if level + 1 < levels and h % 2 == 0 and w % 2 == 0 and min(h, w) >= 4:
            p = avgpool2x(p)
            t = avgpool2x(t)
        else:
            break
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(terms))


def recon_loss(pred: Tensor, target: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """MSE + lambda * gradient-pyramid proxy, on [C, H, W] images."""
    if cfg is None:
        cfg = LossConfig()
    loss = mse(pred, target)
    if cfg.lambda_perc != 0.0:
        proxy = gradient_pyramid_proxy(pred, target, cfg.pyramid_levels)
        loss = T.add(loss, T.mul(proxy, cfg.lambda_perc))
    return loss


# ---------------------------------------------------------------------------
# Metrics (plain numpy; not differentiated)


def psnr(pred, target, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB (identical images hit the cap)."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    err = float(np.mean((pred - target) ** 2))
    if err == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(peak * peak / err))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(pred, target, peak: float = 1.0) -> float:
    """Mean local SSIM on the grayscale (channel-mean) images.

    11x11 Gaussian window, sigma 1.5, C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
    Images smaller than the window are rejected.
    """
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"ssim: shape mismatch {pred.shape} vs {target.shape}")
    x = pred.mean(axis=0) if pred.ndim == 3 else pred
    y = target.mean(axis=0) if target.ndim == 3 else target
    h, w = x.shape
    if h < 11 or w < 11:
        raise ValueError(f"ssim: image {h}x{w} is smaller than the 11x11 window")
    win = _gaussian_window()

    def wstats(a):
        v = np.lib.stride_tricks.sliding_window_view(a, (11, 11))
        return np.einsum("ijkl,kl->ij", v, win)

    mu_x, mu_y = wstats(x), wstats(y)
    xx, yy, xy = wstats(x * x), wstats(y * y), wstats(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def metrics_report(rows: list[tuple[str, float, float]]) -> str:
    """Tab-separated "name psnr ssim" lines plus an aggregate mean line."""
    lines = [f"{name}\t{p:.6f}\t{s:.6f}" for name, p, s in rows]
    if rows:
        mp = sum(r[1] for r in rows) / len(rows)
        ms = sum(r[2] for r in rows) / len(rows)
        lines.append(f"mean\t{mp:.6f}\t{ms:.6f}")
    return "\n".join(lines) + "\n"
