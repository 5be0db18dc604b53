"""Pure NumPy kernel backend.

Every hot kernel used by the tape lives here as a plain function over
float64 C-contiguous arrays.  The compiled backend (``_ckern``) implements
the same surface; whichever is active is looked up through
``queryformer.kernels.get()``.  Backward kernels accumulate into the
supplied gradient buffer (``+=``), they never overwrite it.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def gemm(a: np.ndarray, b: np.ndarray, ta: bool = False, tb: bool = False) -> np.ndarray:
    """General matrix product op(a) @ op(b), op = transpose when the flag is set."""
    left = a.T if ta else a
    right = b.T if tb else b
    return left @ right


def gemm_acc(c: np.ndarray, a: np.ndarray, b: np.ndarray, ta: bool = False, tb: bool = False) -> None:
    """c += op(a) @ op(b)."""
    left = a.T if ta else a
    right = b.T if tb else b
    c += left @ right


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_acc(gx: np.ndarray, y: np.ndarray, gy: np.ndarray) -> None:
    inner = (gy * y).sum(axis=1, keepdims=True)
    gx += y * (gy - inner)


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float):
    """Row-wise layer norm; returns (y, xhat, rstd) with xhat/rstd cached for backward."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + shift, xhat, rstd


def layernorm_bwd_acc(gx, ggain, gshift, gy, xhat, rstd, gain) -> None:
    n = xhat.shape[1]
    dxhat = gy * gain
    ggain += (gy * xhat).sum(axis=0)
    gshift += gy.sum(axis=0)
    mean_dxhat = dxhat.sum(axis=1, keepdims=True) / n
    mean_proj = (dxhat * xhat).sum(axis=1, keepdims=True) / n
    gx += rstd * (dxhat - mean_dxhat - xhat * mean_proj)


def sigmoid_fwd(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd_acc(gx: np.ndarray, gy: np.ndarray, y: np.ndarray) -> None:
    gx += gy * y * (1.0 - y)


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd_acc(gx: np.ndarray, gy: np.ndarray, x: np.ndarray) -> None:
    gx += gy * (x > 0.0)


def acc_mul(out: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """out += a * b (elementwise)."""
    out += a * b


def box_sincos_fwd(boxes: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    """Sinusoidal encoding of box rows.

    boxes is (n, 4); each coordinate gets ``2 * len(inv_freq)`` output slots,
    interleaved sin/cos over the frequency ladder, coordinate segments
    concatenated in (x, y, h, w) order.
    """
    n = boxes.shape[0]
    pairs = inv_freq.shape[0]
    seg = 2 * pairs
    out = np.empty((n, 4 * seg))
    for c in range(4):
        ang = boxes[:, c : c + 1] * inv_freq[np.newaxis, :]
        out[:, c * seg + 0 : (c + 1) * seg : 2] = np.sin(ang)
        out[:, c * seg + 1 : (c + 1) * seg : 2] = np.cos(ang)
    return out


def box_sincos_bwd_acc(gboxes: np.ndarray, gout: np.ndarray, out: np.ndarray, inv_freq: np.ndarray) -> None:
    pairs = inv_freq.shape[0]
    seg = 2 * pairs
    for c in range(4):
        gsin = gout[:, c * seg + 0 : (c + 1) * seg : 2]
        gcos = gout[:, c * seg + 1 : (c + 1) * seg : 2]
        cosv = out[:, c * seg + 1 : (c + 1) * seg : 2]
        sinv = out[:, c * seg + 0 : (c + 1) * seg : 2]
        gboxes[:, c] += ((gsin * cosv - gcos * sinv) * inv_freq[np.newaxis, :]).sum(axis=1)
