"""Image file writers/readers: PNG for previews, PFM for loss-grade floats.

Images are [3, H, W] (or [H, W] grayscale) float64 arrays. PNG quantizes to
8 bits with round-half-up; PFM stores little-endian float32 rows
bottom-to-top (the format's own convention). Both writers are deterministic:
identical arrays produce identical bytes.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


class ImageFileError(ValueError):
    """Malformed image file or un-writable image array."""


def _chw_to_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3 and img.shape[0] in (1, 3):
        return img.transpose(1, 2, 0)
    raise ImageFileError(f"expected [3,H,W], [1,H,W] or [H,W] image, got {img.shape}")


def save_png(path, img) -> None:
    """Write a float image in [0, 1] as 8-bit PNG (values are clipped)."""
    hwc = _chw_to_hwc(img)
    q = np.floor(np.clip(hwc, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG as float64 [3, H, W] in [0, 1] (grayscale is replicated)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_pfm(path, img) -> None:
    """Write a float image as PFM (float32, little-endian, rows bottom-up)."""
    hwc = _chw_to_hwc(img)
    h, w, c = hwc.shape
    if c == 1:
        header, payload = b"Pf", hwc[:, :, 0]
    else:
        header, payload = b"PF", hwc
    data = payload[::-1].astype("<f4").tobytes()  # bottom row first
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(data)


def load_pfm(path) -> np.ndarray:
    """Read a PFM as float64, [3, H, W] for color or [H, W] for grayscale."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header not in (b"PF", b"Pf"):
            raise ImageFileError(f"{path}: not a PFM file (header {header!r})")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ImageFileError(f"{path}: malformed PFM size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        if scale >= 0:
            raise ImageFileError(f"{path}: big-endian PFM not supported")
        n = w * h * (3 if header == b"PF" else 1)
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise ImageFileError(f"{path}: truncated PFM payload")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if header == b"PF":
        return flat.reshape(h, w, 3)[::-1].transpose(2, 0, 1).copy()
    return flat.reshape(h, w)[::-1].copy()
