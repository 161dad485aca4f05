"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(c, k, k, n, oh, ow),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * k * k, n * oh * ow)


def col2im(
    cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int
) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    blocks = cols.reshape(c, k, k, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                blocks[:, :, i, j]
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)
