"""Differentiable ops. Inputs are never modified in place."""
import numpy as np

from .. import kernels
from .tensor import DTYPE, Tensor, make_result


class ShapeError(ValueError):
    pass


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """Zero-padded cross-correlation, NCHW input and OIHW weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weights, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"input has {c} channels, weights expect {c2}")
    if b.shape != (o,):
        raise ShapeError(f"bias shape {b.shape} != ({o},)")
    ho = kernels.conv_out_size(h, kh, stride, padding)
    wo = kernels.conv_out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(o, -1)
    out = w2 @ cols
    out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=1, dtype=np.float64).astype(DTYPE))
        if x.requires_grad:
            x._accumulate(kernels.col2im(w2.T @ g2, n, c, h, wd, kh, kw, stride, padding))

    return make_result(out, (x, w, b), _backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, DTYPE(0))

    def _backward(g):
        x._accumulate(np.where(mask, g, DTYPE(0)))

    return make_result(out, (x,), _backward, "relu")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs spatial size >= 2, got {h}x{w}")
    out, arg = kernels.maxpool_fwd(np.ascontiguousarray(x.data))

    def _backward(g):
        x._accumulate(kernels.maxpool_bwd(np.ascontiguousarray(g), arg, h, w))

    return make_result(out, (x,), _backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    def _backward(g):
        x._accumulate(np.broadcast_to((g / DTYPE(h * w))[:, :, None, None], x.shape))

    return make_result(out, (x,), _backward, "global_avg_pool")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weights {w.shape}")
    out = x.data @ w.data.T + b.data

    def _backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, dtype=np.float64).astype(DTYPE))

    return make_result(out, (x, w, b), _backward, "linear")


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    out = (x.data * DTYPE(scale) + DTYPE(shift)).astype(DTYPE)

    def _backward(g):
        x._accumulate(g * DTYPE(scale))

    return make_result(out, (x,), _backward, "affine")


def flatten_scalar(x: Tensor) -> Tensor:
    """(N, 1) -> (N,)."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise ShapeError(f"expected (N, 1), got {x.shape}")
    out = x.data[:, 0].copy()

    def _backward(g):
        x._accumulate(g[:, None])

    return make_result(out, (x,), _backward, "flatten_scalar")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64."""
    t = np.asarray(target, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {t.shape}")
    if t.size == 0:
        raise ValueError("mse_loss on an empty batch")
    diff = pred.data.astype(np.float64) - t

    def _backward(g):
        pred._accumulate((float(g) * 2.0 / diff.size * diff).astype(DTYPE))

    return make_result(np.asarray(np.mean(diff * diff)), (pred,), _backward, "mse_loss")
