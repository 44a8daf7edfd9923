"""Pure-numpy versions of the hot kernels.

These are the reference implementations; the Cython module ``_ckernels``
must agree with them to float rounding.
"""

import numpy as np


def im2col3x3(x):
    """Unfold 3x3 zero-padded neighbourhoods of an NHWC array.

    Returns an array of shape (N*H*W, 9*C) whose columns are ordered
    (dy, dx, c), matching a kernel stored as (3, 3, C, out).
    """
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def col2im3x3(cols, shape):
    """Adjoint of :func:`im2col3x3`: scatter-add columns back to NHWC."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, 3, 3, c)
    xp = np.zeros((n, h + 2, w + 2, c), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w, :] += cols[:, :, :, dy, dx, :]
    return np.ascontiguousarray(xp[:, 1:-1, 1:-1, :])


def crop_resize(images, boxes, out_size):
    """Bilinear crop-and-resize of a batch.

    Parameters
    ----------
    images : (N, H, W, C) float array
    boxes : (N, 4) float array of (top, left, height, width) in pixels
    out_size : int

    Sample positions follow the half-pixel-centre convention, so a box
    covering the whole image with ``out_size == H == W`` is the identity.
    """
    n, h, w, c = images.shape
    t = (np.arange(out_size, dtype=np.float64) + 0.5) / out_size
    ys = boxes[:, 0:1] + t[None, :] * boxes[:, 2:3] - 0.5
    xs = boxes[:, 1:2] + t[None, :] * boxes[:, 3:4] - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    b = np.arange(n)[:, None, None]
    top = (images[b, y0[:, :, None], x0[:, None, :]] * (1.0 - wx)
           + images[b, y0[:, :, None], x1[:, None, :]] * wx)
    bot = (images[b, y1[:, :, None], x0[:, None, :]] * (1.0 - wx)
           + images[b, y1[:, :, None], x1[:, None, :]] * wx)
    out = top * (1.0 - wy) + bot * wy
    return out.astype(images.dtype, copy=False)
