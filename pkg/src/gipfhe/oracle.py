"""Plaintext reference operators.

Straight nested loops over the functional definitions; nothing here shares
code with the packed operators so the two can be compared differentially.
Tensors are ``C x H x W`` float64 arrays.
"""

import math

import numpy as np


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float64)


def conv2d_ref(x, weight, stride=1, padding=None, bias=None):
    """Cross-correlation with zero padding; weight is (C_out, C_in, k, k)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    C, H, W = x.shape
    Co, Ci, k, k2 = weight.shape
    if Ci != C or k != k2:
        raise ValueError(f"weight {weight.shape} does not match input {x.shape}")
    p = (k - 1) // 2 if padding is None else padding
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    out = _zeros(Co, Ho, Wo)
    for o in range(Co):
        for y in range(Ho):
            for xx in range(Wo):
                acc = 0.0 if bias is None else float(bias[o])
                for i in range(Ci):
                    for ky in range(k):
                        iy = y * stride + ky - p
                        if iy < 0 or iy >= H:
                            continue
                        for kx in range(k):
                            ix = xx * stride + kx - p
                            if 0 <= ix < W:
                                acc += weight[o, i, ky, kx] * x[i, iy, ix]
                out[o, y, xx] = acc
    return out


def deconv2d_ref(x, weight, stride=2, padding=0, output_padding=0, bias=None):
    """Transposed convolution by scatter; weight is (C_in, C_out, k, k)."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    C, H, W = x.shape
    Ci, Co, k, _ = weight.shape
    if Ci != C:
        raise ValueError(f"weight {weight.shape} does not match input {x.shape}")
    Ho = (H - 1) * stride + k - 2 * padding + output_padding
    Wo = (W - 1) * stride + k - 2 * padding + output_padding
    out = _zeros(Co, Ho, Wo)
    for i in range(Ci):
        for y in range(H):
            for xx in range(W):
                v = x[i, y, xx]
                for o in range(Co):
                    for ky in range(k):
                        oy = y * stride - padding + ky
                        if oy < 0 or oy >= Ho:
                            continue
                        for kx in range(k):
                            ox = xx * stride - padding + kx
                            if 0 <= ox < Wo:
                                out[o, oy, ox] += weight[i, o, ky, kx] * v
    if bias is not None:
        for o in range(Co):
            out[o] += bias[o]
    return out


def avgpool_ref(x, window, stride=None):
    stride = window if stride is None else stride
    C, H, W = np.shape(x)
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = _zeros(C, Ho, Wo)
    for c in range(C):
        for y in range(Ho):
            for xx in range(Wo):
                s = 0.0
                for dy in range(window):
                    for dx in range(window):
                        s += x[c][y * stride + dy][xx * stride + dx]
                out[c, y, xx] = s / (window * window)
    return out


def maxpool_ref(x, window, stride=None):
    stride = window if stride is None else stride
    C, H, W = np.shape(x)
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = _zeros(C, Ho, Wo)
    for c in range(C):
        for y in range(Ho):
            for xx in range(Wo):
                out[c, y, xx] = max(
                    x[c][y * stride + dy][xx * stride + dx] for dy in range(window) for dx in range(window)
                )
    return out


def upsample_ref(x, scale):
    C, H, W = np.shape(x)
    out = _zeros(C, H * scale, W * scale)
    for c in range(C):
        for y in range(H * scale):
            for xx in range(W * scale):
                out[c, y, xx] = x[c][y // scale][xx // scale]
    return out


def affine_ref(x, scale, shift):
    C, H, W = np.shape(x)
    out = _zeros(C, H, W)
    for c in range(C):
        for y in range(H):
            for xx in range(W):
                out[c, y, xx] = scale[c] * x[c][y][xx] + shift[c]
    return out


def polyact_ref(x, coeffs):
    """Per-channel quartic ``sum_j coeffs[c][j] * v**j``; coeffs may be a single row."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    C, H, W = np.shape(x)
    if coeffs.ndim == 1:
        coeffs = np.tile(coeffs, (C, 1))
    out = _zeros(C, H, W)
    for c in range(C):
        for y in range(H):
            for xx in range(W):
                v = x[c][y][xx]
                out[c, y, xx] = sum(coeffs[c][j] * v**j for j in range(len(coeffs[c])))
    return out


def relu_ref(x):
    return np.where(np.asarray(x) > 0, x, 0.0)


def silu_ref(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


def add_ref(x, y):
    return np.asarray(x, dtype=np.float64) + np.asarray(y, dtype=np.float64)


def polyact_rn_ref(x, hermite, running_max, gamma=3.0, eps=1e-5):
    """Inference-mode range-normalised activation written against the basis definition."""
    C, H, W = np.shape(x)
    r6 = math.sqrt(6.0)
    basis = (
        lambda v: 1.0,
        lambda v: v,
        lambda v: (v * v - 1.0) / math.sqrt(2.0),
        lambda v: (v**3 - 3.0 * v) / r6,
        lambda v: (v**4 - 6.0 * v * v + 3.0) / (2.0 * r6),
    )
    out = _zeros(C, H, W)
    for c in range(C):
        q = running_max[c] / gamma + eps
        for y in range(H):
            for xx in range(W):
                v = x[c][y][xx] / q
                out[c, y, xx] = q * sum(f * h(v) for f, h in zip(hermite, basis))
    return out
