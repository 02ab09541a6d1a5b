"""Independent scalar-loop oracles for engine primitives.

Everything here is written with explicit Python loops and math.* calls so it
shares no code path with the engine. Slow on purpose; keep shapes tiny.
"""

import math

import numpy as np


def matmul_ref(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_ref(x, w, bias=None):
    n_, c_, h_, wd = x.shape
    f_, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((n_, f_, h_, wd))
    for n in range(n_):
        for f in range(f_):
            for i in range(h_):
                for j in range(wd):
                    s = 0.0
                    for c in range(c_):
                        for a in range(kh):
                            for b in range(kw):
                                ii, jj = i + a - ph, j + b - pw
                                if 0 <= ii < h_ and 0 <= jj < wd:
                                    s += x[n, c, ii, jj] * w[f, c, a, b]
                    if bias is not None:
                        s += bias[f]
                    out[n, f, i, j] = s
    return out


def softmax_ref(x):
    x = np.asarray(x)
    out = np.zeros_like(x)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for r in range(flat.shape[0]):
        row = flat[r]
        m = max(float(v) for v in row)
        exps = [math.exp(float(v) - m) for v in row]
        s = sum(exps)
        for j, e in enumerate(exps):
            oflat[r, j] = e / s
    return out


def sdpa_ref(q, k, v):
    n, d = q.shape
    m, dv = v.shape
    scale = 1.0 / math.sqrt(d)
    scores = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(d):
                s += q[i, t] * k[j, t]
            scores[i, j] = s * scale
    p = softmax_ref(scores)
    out = np.zeros((n, dv))
    for i in range(n):
        for j in range(dv):
            s = 0.0
            for t in range(m):
                s += p[i, t] * v[t, j]
            out[i, j] = s
    return out


def bilinear_ref(grid, pts):
    c, h, w = grid.shape
    out = np.zeros((len(pts), c))
    for n, (x, y) in enumerate(pts):
        x = min(max(float(x), 0.0), w - 1.0)
        y = min(max(float(y), 0.0), h - 1.0)
        x0 = min(int(math.floor(x)), w - 2)
        y0 = min(int(math.floor(y)), h - 2)
        fx, fy = x - x0, y - y0
        for ch in range(c):
            top = grid[ch, y0, x0] * (1 - fx) + grid[ch, y0, x0 + 1] * fx
            bot = grid[ch, y0 + 1, x0] * (1 - fx) + grid[ch, y0 + 1, x0 + 1] * fx
            out[n, ch] = top * (1 - fy) + bot * fy
    return out


def trilinear_ref(grid, pts):
    c, d, h, w = grid.shape
    out = np.zeros((len(pts), c))
    for n, (x, y, z) in enumerate(pts):
        x = min(max(float(x), 0.0), w - 1.0)
        y = min(max(float(y), 0.0), h - 1.0)
        z = min(max(float(z), 0.0), d - 1.0)
        x0 = min(int(math.floor(x)), w - 2)
        y0 = min(int(math.floor(y)), h - 2)
        z0 = min(int(math.floor(z)), d - 2)
        fx, fy, fz = x - x0, y - y0, z - z0
        for ch in range(c):
            acc = 0.0
            for dz in (0, 1):
                for dy in (0, 1):
                    for dx in (0, 1):
                        wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy) * (fz if dz else 1 - fz)
                        acc += grid[ch, z0 + dz, y0 + dy, x0 + dx] * wgt
            out[n, ch] = acc
    return out


def upsample2x_ref(x):
    c, h, w = x.shape
    out = np.zeros((c, 2 * h, 2 * w))
    for ch in range(c):
        for i in range(2 * h):
            for j in range(2 * w):
                out[ch, i, j] = x[ch, i // 2, j // 2]
    return out


def sigmoid_ref(x):
    out = np.zeros_like(x)
    for i, v in enumerate(x.ravel()):
        out.ravel()[i] = 1.0 / (1.0 + math.exp(-float(v)))
    return out


def silu_ref(x):
    out = np.zeros_like(x)
    for i, v in enumerate(x.ravel()):
        v = float(v)
        out.ravel()[i] = v / (1.0 + math.exp(-v))
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b) / denom))
