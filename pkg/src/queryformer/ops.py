"""Tape operations: analytic forward/backward pairs over DualTensors.

Every function takes the tape first, validates shapes, computes the value
through the active kernel backend and records a backward closure.  Tensors
whose inputs are all constants propagate ``needs_grad=False`` and record
nothing, so constant machinery (positional grids, interpolation matrices,
patch gathers) costs no backward work.  Bilinear resizing and 2x2 average
pooling are expressed as matrix products against cached constant
interpolation matrices, so their gradients ride on the matmul backward.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tape import DualTensor, ShapeError, Tape


def constant(values) -> DualTensor:
    """Wrap an array as a gradient-free leaf."""
    return DualTensor(values, needs_grad=False)


def _need2d(name: str, *tensors: DualTensor) -> None:
    for t in tensors:
        if t.ndim != 2:
            raise ShapeError(f"{name}: expected 2-d operand, got shape {t.shape}")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    _need2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    k = kernels.get()
    out = DualTensor(k.gemm(a.values, b.values), needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            k.gemm_acc(a.grad, out.grad, b.values, tb=True)
        if b.needs_grad:
            k.gemm_acc(b.grad, a.values, out.grad, ta=True)

    tape.record(backward)
    return out


def matmul_nt(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    """a @ b.T without materializing the transpose."""
    _need2d("matmul_nt", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: trailing dimensions differ, {a.shape} x {b.shape}")
    k = kernels.get()
    out = DualTensor(k.gemm(a.values, b.values, tb=True), needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            k.gemm_acc(a.grad, out.grad, b.values)
        if b.needs_grad:
            k.gemm_acc(b.grad, out.grad, a.values, ta=True)

    tape.record(backward)
    return out


def linear(tape: Tape, x: DualTensor, w: DualTensor, b: DualTensor) -> DualTensor:
    """Affine map x @ w + b with b broadcast over rows."""
    _need2d("linear", x, w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with weight {w.shape}")
    if b.values.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    k = kernels.get()
    vals = k.gemm(x.values, w.values)
    vals += b.values
    out = DualTensor(vals, needs_grad=x.needs_grad or w.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if x.needs_grad:
            k.gemm_acc(x.grad, out.grad, w.values, tb=True)
        if w.needs_grad:
            k.gemm_acc(w.grad, x.values, out.grad, ta=True)
        if b.needs_grad:
            b.grad += out.grad.sum(axis=0)

    tape.record(backward)
    return out


def transpose(tape: Tape, a: DualTensor) -> DualTensor:
    _need2d("transpose", a)
    out = DualTensor(np.ascontiguousarray(a.values.T), needs_grad=a.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        a.grad += out.grad.T

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# row-wise kernels

def softmax_rows(tape: Tape, x: DualTensor) -> DualTensor:
    """Row-wise softmax with per-row max subtraction."""
    _need2d("softmax_rows", x)
    k = kernels.get()
    out = DualTensor(k.softmax_fwd(x.values), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        k.softmax_bwd_acc(x.grad, out.values, out.grad)

    tape.record(backward)
    return out


def layer_norm_rows(tape: Tape, x: DualTensor, gain: DualTensor, shift: DualTensor,
                    eps: float = 1e-5) -> DualTensor:
    _need2d("layer_norm_rows", x)
    if gain.values.shape != (x.shape[1],) or shift.values.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm_rows: gain/shift must be ({x.shape[1]},)")
    k = kernels.get()
    y, xhat, rstd = k.layernorm_fwd(x.values, gain.values, shift.values, eps)
    needs = x.needs_grad or gain.needs_grad or shift.needs_grad
    out = DualTensor(y, needs_grad=needs)
    if not needs:
        return out
    if not (x.needs_grad and gain.needs_grad and shift.needs_grad):
        # The fused kernel accumulates all three; route unused ones to scratch.
        gx = x.grad if x.needs_grad else np.zeros_like(x.values)
        ggain = gain.grad if gain.needs_grad else np.zeros_like(gain.values)
        gshift = shift.grad if shift.needs_grad else np.zeros_like(shift.values)
    else:
        gx, ggain, gshift = x.grad, gain.grad, shift.grad

    def backward():
        k.layernorm_bwd_acc(gx, ggain, gshift, out.grad, xhat, rstd, gain.values)

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# elementwise

def relu(tape: Tape, x: DualTensor) -> DualTensor:
    k = kernels.get()
    out = DualTensor(k.relu_fwd(x.values) if x.ndim == 2 else np.maximum(x.values, 0.0),
                     needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if x.ndim == 2:
            k.relu_bwd_acc(x.grad, out.grad, x.values)
        else:
            x.grad += out.grad * (x.values > 0.0)

    tape.record(backward)
    return out


def sigmoid(tape: Tape, x: DualTensor) -> DualTensor:
    k = kernels.get()
    if x.ndim == 2:
        y = k.sigmoid_fwd(x.values)
    else:
        y = k.sigmoid_fwd(x.values.reshape(1, -1)).reshape(x.shape)
    out = DualTensor(y, needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad * out.values * (1.0 - out.values)

    tape.record(backward)
    return out


def softplus(tape: Tape, x: DualTensor) -> DualTensor:
    """log(1 + exp(x)), overflow-safe; derivative is sigmoid(x)."""
    out = DualTensor(np.logaddexp(0.0, x.values), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out
    s = 1.0 / (1.0 + np.exp(-np.clip(x.values, -745.0, 745.0)))

    def backward():
        x.grad += out.grad * s

    tape.record(backward)
    return out


def exp_(tape: Tape, x: DualTensor) -> DualTensor:
    out = DualTensor(np.exp(x.values), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad * out.values

    tape.record(backward)
    return out


def log_(tape: Tape, x: DualTensor) -> DualTensor:
    out = DualTensor(np.log(x.values), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad / x.values

    tape.record(backward)
    return out


def powc(tape: Tape, x: DualTensor, p: float) -> DualTensor:
    """x ** p for constant p; defined for positive x."""
    out = DualTensor(np.power(x.values, p), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad * p * np.power(x.values, p - 1.0)

    tape.record(backward)
    return out


def absval(tape: Tape, x: DualTensor) -> DualTensor:
    out = DualTensor(np.abs(x.values), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad * np.sign(x.values)

    tape.record(backward)
    return out


def scale(tape: Tape, x: DualTensor, c: float) -> DualTensor:
    out = DualTensor(x.values * c, needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad * c

    tape.record(backward)
    return out


def _need_same_shape(name: str, a: DualTensor, b: DualTensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def add(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    _need_same_shape("add", a, b)
    out = DualTensor(a.values + b.values, needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            a.grad += out.grad
        if b.needs_grad:
            b.grad += out.grad

    tape.record(backward)
    return out


def sub(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    _need_same_shape("sub", a, b)
    out = DualTensor(a.values - b.values, needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            a.grad += out.grad
        if b.needs_grad:
            b.grad -= out.grad

    tape.record(backward)
    return out


def mul(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    _need_same_shape("mul", a, b)
    k = kernels.get()
    out = DualTensor(a.values * b.values, needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out
    two_d = a.ndim == 2

    def backward():
        if a.needs_grad:
            if two_d:
                k.acc_mul(a.grad, out.grad, b.values)
            else:
                a.grad += out.grad * b.values
        if b.needs_grad:
            if two_d:
                k.acc_mul(b.grad, out.grad, a.values)
            else:
                b.grad += out.grad * a.values

    tape.record(backward)
    return out


def div(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    _need_same_shape("div", a, b)
    out = DualTensor(a.values / b.values, needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            a.grad += out.grad / b.values
        if b.needs_grad:
            b.grad -= out.grad * out.values / b.values

    tape.record(backward)
    return out


def minimum(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    """Elementwise min; on ties the gradient goes to the first operand."""
    _need_same_shape("minimum", a, b)
    take_a = a.values <= b.values
    out = DualTensor(np.where(take_a, a.values, b.values), needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            a.grad += out.grad * take_a
        if b.needs_grad:
            b.grad += out.grad * ~take_a

    tape.record(backward)
    return out


def maximum(tape: Tape, a: DualTensor, b: DualTensor) -> DualTensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    _need_same_shape("maximum", a, b)
    take_a = a.values >= b.values
    out = DualTensor(np.where(take_a, a.values, b.values), needs_grad=a.needs_grad or b.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if a.needs_grad:
            a.grad += out.grad * take_a
        if b.needs_grad:
            b.grad += out.grad * ~take_a

    tape.record(backward)
    return out


def elementwise(tape: Tape, name: str, *args) -> DualTensor:
    """Named-combinator entry point: relu | sigmoid | add | scale."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "scale": scale}
    if name not in table:
        raise ValueError(f"elementwise: unknown op {name!r}, expected one of {sorted(table)}")
    return table[name](tape, *args)


# ---------------------------------------------------------------------------
# reductions and broadcasts

def sum_all(tape: Tape, x: DualTensor) -> DualTensor:
    out = DualTensor(np.array([[x.values.sum()]]), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad[0, 0]

    tape.record(backward)
    return out


def scale_rows(tape: Tape, x: DualTensor, v: DualTensor) -> DualTensor:
    """Multiply row i of x by v[i, 0]."""
    _need2d("scale_rows", x, v)
    if v.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows: v must be ({x.shape[0]}, 1), got {v.shape}")
    out = DualTensor(x.values * v.values, needs_grad=x.needs_grad or v.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        if x.needs_grad:
            x.grad += out.grad * v.values
        if v.needs_grad:
            v.grad += (out.grad * x.values).sum(axis=1, keepdims=True)

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# layout

def reshape(tape: Tape, x: DualTensor, shape: tuple) -> DualTensor:
    out = DualTensor(x.values.reshape(shape).copy(), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad += out.grad.reshape(x.shape)

    tape.record(backward)
    return out


def slice_cols(tape: Tape, x: DualTensor, j0: int, j1: int) -> DualTensor:
    _need2d("slice_cols", x)
    if not (0 <= j0 < j1 <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{j0}:{j1}] out of range for {x.shape}")
    out = DualTensor(np.ascontiguousarray(x.values[:, j0:j1]), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad[:, j0:j1] += out.grad

    tape.record(backward)
    return out


def slice_rows(tape: Tape, x: DualTensor, i0: int, i1: int) -> DualTensor:
    _need2d("slice_rows", x)
    if not (0 <= i0 < i1 <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{i0}:{i1}] out of range for {x.shape}")
    out = DualTensor(np.ascontiguousarray(x.values[i0:i1, :]), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        x.grad[i0:i1, :] += out.grad

    tape.record(backward)
    return out


def concat_cols(tape: Tape, parts: list) -> DualTensor:
    _need2d("concat_cols", *parts)
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    needs = any(p.needs_grad for p in parts)
    out = DualTensor(np.concatenate([p.values for p in parts], axis=1), needs_grad=needs)
    if not needs:
        return out
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward():
        for p, j0, j1 in zip(parts, edges[:-1], edges[1:]):
            if p.needs_grad:
                p.grad += out.grad[:, j0:j1]

    tape.record(backward)
    return out


def concat_rows(tape: Tape, parts: list) -> DualTensor:
    _need2d("concat_rows", *parts)
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    needs = any(p.needs_grad for p in parts)
    out = DualTensor(np.concatenate([p.values for p in parts], axis=0), needs_grad=needs)
    if not needs:
        return out
    edges = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward():
        for p, i0, i1 in zip(parts, edges[:-1], edges[1:]):
            if p.needs_grad:
                p.grad += out.grad[i0:i1, :]

    tape.record(backward)
    return out


def gather_rows(tape: Tape, x: DualTensor, idx) -> DualTensor:
    _need2d("gather_rows", x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")
    out = DualTensor(x.values[idx, :], needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        np.add.at(x.grad, idx, out.grad)

    tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# resampling (cached interpolation matrices)

_BILINEAR_CACHE: dict = {}
_POOL_CACHE: dict = {}


def bilinear_matrix(h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """Dense (out_h*out_w, h*w) matrix applying half-pixel-center bilinear
    resampling with source edge clamping.  Rows sum to 1."""
    if h < 1 or w < 1:
        raise ShapeError(f"bilinear_matrix: source {h}x{w} must be at least 1x1")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_matrix: output {out_h}x{out_w} must be at least 1x1")
    key = (h, w, out_h, out_w)
    cached = _BILINEAR_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((out_h * out_w, h * w))
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            r = oy * out_w + ox
            m[r, y0c * w + x0c] += (1.0 - fy) * (1.0 - fx)
            m[r, y0c * w + x1c] += (1.0 - fy) * fx
            m[r, y1c * w + x0c] += fy * (1.0 - fx)
            m[r, y1c * w + x1c] += fy * fx
    _BILINEAR_CACHE[key] = m
    return m


def avgpool2_matrix(h: int, w: int) -> np.ndarray:
    """(ceil(h/2)*ceil(w/2), h*w) matrix averaging 2x2 blocks; edge blocks
    average over the cells actually present."""
    key = (h, w)
    cached = _POOL_CACHE.get(key)
    if cached is not None:
        return cached
    oh, ow = (h + 1) // 2, (w + 1) // 2
    m = np.zeros((oh * ow, h * w))
    for oy in range(oh):
        ys = range(2 * oy, min(2 * oy + 2, h))
        for ox in range(ow):
            xs = range(2 * ox, min(2 * ox + 2, w))
            weight = 1.0 / (len(ys) * len(xs))
            for y in ys:
                for x in xs:
                    m[oy * ow + ox, y * w + x] = weight
    _POOL_CACHE[key] = m
    return m


def bilinear_resize(tape: Tape, x: DualTensor, out_h: int, out_w: int) -> DualTensor:
    """Resize a 2-d map with half-pixel-center bilinear sampling, edges
    clamped.  Gradient scatters back through the sampling weights."""
    _need2d("bilinear_resize", x)
    h, w = x.shape
    m = bilinear_matrix(h, w, out_h, out_w)
    flat = reshape(tape, x, (h * w, 1))
    out_flat = matmul(tape, constant(m), flat)
    return reshape(tape, out_flat, (out_h, out_w))


def resize_grid(tape: Tape, x: DualTensor, h: int, w: int, out_h: int, out_w: int) -> DualTensor:
    """Bilinear-resize a flattened (h*w, d) feature grid to (out_h*out_w, d)."""
    if x.shape[0] != h * w:
        raise ShapeError(f"resize_grid: {x.shape} does not hold a {h}x{w} grid")
    return matmul(tape, constant(bilinear_matrix(h, w, out_h, out_w)), x)


def resize_cols(tape: Tape, x: DualTensor, h: int, w: int, out_h: int, out_w: int) -> DualTensor:
    """Bilinear-resize along the column axis: rows of x are flattened h*w
    maps; the result rows are flattened out_h*out_w maps."""
    if x.shape[1] != h * w:
        raise ShapeError(f"resize_cols: {x.shape} rows do not hold {h}x{w} maps")
    return matmul_nt(tape, x, constant(bilinear_matrix(h, w, out_h, out_w)))


def avg_pool_grid(tape: Tape, x: DualTensor, h: int, w: int) -> DualTensor:
    """2x2 average-pool a flattened (h*w, d) grid to (ceil(h/2)*ceil(w/2), d)."""
    if x.shape[0] != h * w:
        raise ShapeError(f"avg_pool_grid: {x.shape} does not hold a {h}x{w} grid")
    return matmul(tape, constant(avgpool2_matrix(h, w)), x)


# ---------------------------------------------------------------------------
# box coordinate transforms

def inverse_sigmoid(tape: Tape, x: DualTensor, eps: float = 1e-6) -> DualTensor:
    """log(x / (1 - x)) with inputs clamped to [eps, 1 - eps]."""
    v = np.clip(x.values, eps, 1.0 - eps)
    out = DualTensor(np.log(v) - np.log1p(-v), needs_grad=x.needs_grad)
    if not out.needs_grad:
        return out
    inside = (x.values > eps) & (x.values < 1.0 - eps)
    deriv = np.where(inside, 1.0 / (v * (1.0 - v)), 0.0)

    def backward():
        x.grad += out.grad * deriv

    tape.record(backward)
    return out


def box_encoding(tape: Tape, boxes: DualTensor, d_model: int,
                 temperature: float = 10000.0) -> DualTensor:
    """Sinusoidal encoding of (x, y, h, w) rows; each coordinate owns a
    d_model/4 segment of interleaved sin/cos pairs.  Differentiable in the
    box coordinates."""
    _need2d("box_encoding", boxes)
    if boxes.shape[1] != 4:
        raise ShapeError(f"box_encoding: boxes must be (n, 4), got {boxes.shape}")
    if d_model % 8 != 0:
        raise ShapeError(f"box_encoding: d_model must be a multiple of 8, got {d_model}")
    if np.any(boxes.values < 0.0) or np.any(boxes.values > 1.0):
        raise ValueError("box_encoding: coordinates must lie in [0, 1]")
    seg = d_model // 4
    inv_freq = inv_frequencies(seg, temperature)
    k = kernels.get()
    out = DualTensor(k.box_sincos_fwd(boxes.values, inv_freq), needs_grad=boxes.needs_grad)
    if not out.needs_grad:
        return out

    def backward():
        k.box_sincos_bwd_acc(boxes.grad, out.grad, out.values, inv_freq)

    tape.record(backward)
    return out


_FREQ_CACHE: dict = {}


def inv_frequencies(dims: int, temperature: float) -> np.ndarray:
    """1 / temperature**(2j/dims) for pair index j = 0 .. dims/2 - 1."""
    if dims % 2 != 0:
        raise ShapeError(f"inv_frequencies: dims must be even, got {dims}")
    key = (dims, temperature)
    cached = _FREQ_CACHE.get(key)
    if cached is None:
        j = np.arange(dims // 2, dtype=np.float64)
        cached = temperature ** (-2.0 * j / dims)
        _FREQ_CACHE[key] = cached
    return cached


def detach(x: DualTensor) -> DualTensor:
    """Cut the tensor out of the gradient graph (gradient-free value copy)."""
    return DualTensor(x.values.copy(), needs_grad=False)
