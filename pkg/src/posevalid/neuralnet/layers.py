"""Layer primitives with explicit forward/backward passes.

All functions are pure and dtype-preserving: training runs in float32,
gradient checks in float64.  Images are (batch, height, width, channels);
dense inputs may carry any number of leading dimensions.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def conv2d_3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 convolution, stride 1, same padding.  w is (3, 3, c_in, c_out)."""
    if x.ndim != 4 or w.shape[:2] != (3, 3) or x.shape[3] != w.shape[2]:
        raise _shape_error("conv2d_3x3", x.shape, w.shape)
    bsz, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, Cin, 3, 3)
    col = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, 9 * cin)
    y = col @ w.reshape(9 * cin, cout) + b
    return y.reshape(bsz, h, wd, cout), (col, x.shape, w)


def conv2d_3x3_backward(dy: np.ndarray, cache):
    col, x_shape, w = cache
    bsz, h, wd, cin = x_shape
    cout = w.shape[3]
    dyf = dy.reshape(bsz * h * wd, cout)
    dw = (col.T @ dyf).reshape(3, 3, cin, cout)
    db = dyf.sum(axis=0)
    # input gradient = same conv of dy with the 180-degree-rotated, channel-swapped kernel
    w_rot = w[::-1, ::-1].transpose(0, 1, 3, 2)
    dx, _ = conv2d_3x3(dy, np.ascontiguousarray(w_rot), np.zeros(cin, dtype=dy.dtype))
    return dx, dw, db


def maxpool_2x2(x: np.ndarray):
    """2x2 max pooling, stride 2.  Ties route to the first window element."""
    if x.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise _shape_error("maxpool_2x2 (needs even spatial dims)", x.shape)
    bsz, h, wd, c = x.shape
    win = x.reshape(bsz, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(bsz, h // 2, wd // 2, c, 4)
    idx = win.argmax(axis=4)
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return y, (idx, x.shape)


def maxpool_2x2_backward(dy: np.ndarray, cache):
    idx, x_shape = cache
    bsz, h, wd, c = x_shape
    dwin = np.zeros((bsz, h // 2, wd // 2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
    dx = dwin.reshape(bsz, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(bsz, h, wd, c)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Affine layer on the last axis; leading axes are preserved."""
    if x.shape[-1] != w.shape[0]:
        raise _shape_error("dense", x.shape, w.shape)
    return x @ w + b, (x, w)


def dense_backward(dy: np.ndarray, cache):
    x, w = cache
    xf = x.reshape(-1, x.shape[-1])
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    dx = (dyf @ w.T).reshape(x.shape)
    return dx, dw, db


def relu(x: np.ndarray):
    y = np.maximum(x, 0)
    return y, (x > 0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def dropout(x: np.ndarray, keep: float, seed: int, train_flag: bool):
    """Inverted dropout: scale by 1/keep at train time, identity at eval."""
    if not train_flag or keep >= 1.0:
        return x, None
    mask = (np.random.default_rng(seed).random(x.shape) < keep).astype(x.dtype)
    scale = x.dtype.type(1.0 / keep)
    return x * mask * scale, (mask, scale)


def dropout_backward(dy: np.ndarray, cache):
    if cache is None:
        return dy
    mask, scale = cache
    return dy * mask * scale


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over the batch.

    Returns (loss, dlogits, probs); dlogits already carries the 1/batch factor.
    """
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise _shape_error("softmax_cross_entropy", logits.shape, labels.shape)
    bsz = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(bsz), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits /= bsz
    return loss, dlogits.astype(logits.dtype), probs
