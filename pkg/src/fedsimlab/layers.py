"""Low-level numpy kernels for the layer forward/backward passes.

All functions are pure: they never mutate their inputs. Spatial tensors are
(batch, channels, height, width); flat tensors are (batch, features).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    return ho, wo


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Return a strided view (B, C, Ho, Wo, k, k) over the zero-padded input."""
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   stride: int, padding: int) -> np.ndarray:
    """x (B,C,H,W), weight (O,C,k,k), bias (O,) -> (B,O,Ho,Wo)."""
    k = weight.shape[2]
    cols = _windows(x, k, stride, padding)
    y = np.einsum("bcijuv,ocuv->boij", cols, weight, optimize=True)
    return y + bias[None, :, None, None]


def conv2d_backward(x: np.ndarray, weight: np.ndarray, stride: int, padding: int,
                    dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) of a conv2d given upstream dy (B,O,Ho,Wo)."""
    b, c, h, w = x.shape
    k = weight.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]

    cols = _windows(x, k, stride, padding)
    dweight = np.einsum("boij,bcijuv->ocuv", dy, cols, optimize=True)
    dbias = dy.sum(axis=(0, 2, 3))

    dcols = np.einsum("boij,ocuv->bcijuv", dy, weight, optimize=True)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += dcols[:, :, :, :, u, v]
    if padding > 0:
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
    else:
        dx = dxp
    return dx, dweight, dbias


def maxpool2d_forward(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (y, argmax) with argmax the flat in-window index (first max wins)."""
    v = _windows(x, kernel, stride, padding=0)
    b, c, ho, wo = v.shape[:4]
    flat = v.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2d_backward(x_shape: tuple[int, ...], kernel: int, stride: int,
                       arg: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Scatter each dy entry to its argmax input position."""
    b, c, h, w = x_shape
    ho, wo = arg.shape[2], arg.shape[3]
    bi, ci, ii, ji = np.indices((b, c, ho, wo), sparse=False)
    rows = ii * stride + arg // kernel
    cols = ji * stride + arg % kernel
    dx = np.zeros(x_shape, dtype=dy.dtype)
    np.add.at(dx, (bi, ci, rows, cols), dy)
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is defined as 0
    return dy * (x > 0)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (B,I), weight (O,I), bias (O,) -> (B,O)."""
    return x @ weight.T + bias


def dense_backward(x: np.ndarray, weight: np.ndarray,
                   dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dweight = dy.T @ x
    dbias = dy.sum(axis=0)
    dx = dy @ weight
    return dx, dweight, dbias


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(x_shape: tuple[int, ...], dy: np.ndarray) -> np.ndarray:
    b, c, h, w = x_shape
    return np.broadcast_to(dy[:, :, None, None], x_shape) / (h * w)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, numerically stabilized."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n
