"""Differentiable layer primitives: convolutions, pooling, activations."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _node, as_tensor


class ParameterError(ValueError):
    """Raised for invalid layer hyper-parameters."""


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> contiguous (N*H'*W', C*kh*kw)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N*H'*W', C*kh*kw) -> summed into (N, C, Hp, Wp); accumulating channels-last is much faster
    n, c = padded_shape[:2]
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, padded_shape[2], padded_shape[3], c))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[..., i, j]
    return out.transpose(0, 3, 1, 2)


def _check_conv(x_shape, k_shape, stride, pad, in_axis):
    if len(k_shape) != 4:
        raise DimensionError(f"kernel must be 4-D, got shape {k_shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    if x_shape[1] != k_shape[in_axis]:
        raise DimensionError(
            f"channel mismatch: input axis 1 has {x_shape[1]}, kernel axis {in_axis} has {k_shape[in_axis]}")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlate ``x`` ([C,H,W] or [N,C,H,W]) with kernels [O,C,kh,kw]."""
    x, squeeze = _as_batch(as_tensor(x))
    k = as_tensor(k)
    _check_conv(x.shape, k.shape, stride, pad, in_axis=1)
    kh, kw = k.shape[2:]
    h, w = x.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad} (axes 2,3)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    n, o = x.shape[0], k.shape[0]
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = k.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gmat.T @ cols).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(gmat @ kmat, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, k) if bias is None else (x, k, bias)
    out_t = _node(np.ascontiguousarray(out), parents, bw)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


def transposed_conv2d(y: Tensor, k: Tensor, stride: int = 1, pad: int = 0, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel.

    ``k`` has shape [O, C, kh, kw] as for the forward conv: the input here has
    ``O`` channels and the output ``C``.  Output size is (H-1)*stride - 2*pad + kh.
    """
    y, squeeze = _as_batch(as_tensor(y))
    k = as_tensor(k)
    _check_conv(y.shape, k.shape, stride, pad, in_axis=0)
    kh, kw = k.shape[2:]
    n, _, ho, wo = y.shape
    c = k.shape[1]
    hp, wp = (ho - 1) * stride + kh, (wo - 1) * stride + kw
    h, w = hp - 2 * pad, wp - 2 * pad
    if h < 1 or w < 1:
        raise DimensionError(f"transposed conv output would be empty ({h}x{w}) on axes 2,3")
    kmat = k.data.reshape(k.shape[0], -1)
    ymat = y.data.transpose(0, 2, 3, 1).reshape(-1, k.shape[0])
    outp = _col2im(ymat @ kmat, (n, c, hp, wp), kh, kw, stride, ho, wo)
    out = outp[:, :, pad:pad + h, pad:pad + w] if pad else outp
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        cols = _im2col(gp, kh, kw, stride, ho, wo)
        gy = (cols @ kmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2) if y.requires_grad else None
        gk = (ymat.T @ cols).reshape(k.shape) if k.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gy, gk) if bias is None else (gy, gk, gb)

    parents = (y, k) if bias is None else (y, k, bias)
    out_t = _node(np.ascontiguousarray(out), parents, bw)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


# -- activations ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


# -- pooling ----------------------------------------------------------------

def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by ``size``.

    The gradient goes to the first maximal cell of each window in scan order.
    """
    x, squeeze = _as_batch(as_tensor(x))
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d size {size} does not divide spatial shape {(h, w)}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [x.data[:, :, i::size, j::size] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bw(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, i::size, j::size] = g * hit
        return (gx,)

    out_t = _node(out, (x,), bw)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping average pooling by an integer factor."""
    x, squeeze = _as_batch(as_tensor(x))
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d size {size} does not divide spatial shape {(h, w)}")
    ho, wo = h // size, w // size
    out = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        return (gx,)

    out_t = _node(out, (x,), bw)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


def adaptive_avg_pool2d(x: Tensor, out_size: int) -> Tensor:
    h = x.shape[-1]
    if h % out_size:
        raise DimensionError(f"spatial size {h} not divisible by pooled size {out_size}")
    return x if h == out_size else avg_pool2d(x, h // out_size)


def global_avg_pool(x: Tensor) -> Tensor:
    """[C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects 3-D or 4-D input, got {x.shape}")
    return x.mean(axis=(-2, -1))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x, squeeze = _as_batch(as_tensor(x))
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    out_t = _node(out, (x,), bw)
    return out_t.reshape(out_t.shape[1:]) if squeeze else out_t


# -- dense -------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [..., D_in] @ weight [D_in, D_out] + bias."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"fully_connected: input last axis {x.shape[-1]} != weight axis 0 {weight.shape[0]}")
    out = x @ weight
    return out + bias if bias is not None else out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: surviving units are scaled by 1/(1-p) so eval is the identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def l2_norm(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale ``x`` to unit L2 norm along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * proj * (norm >= eps)) / safe,)

    return _node(out, (x,), bw)


def layer_op(x: Tensor, kind: str, **kw) -> Tensor:
    """Dispatch a named layer kind (used by tests and the CLI smoke paths)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=kw.get("axis", -1))
    if kind == "max_pool":
        return max_pool2d(x, kw.get("size", 2))
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "fully_connected":
        return fully_connected(x, kw["weight"], kw.get("bias"))
    if kind == "dropout":
        return dropout(x, kw["p"], kw.get("rng"), kw.get("training", True))
    if kind == "l2_norm":
        return l2_norm(x, axis=kw.get("axis", -1))
    raise ParameterError(f"unknown layer kind {kind!r}")
