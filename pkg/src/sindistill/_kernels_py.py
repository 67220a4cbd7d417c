"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and bit-identical results (the accumulation order is the same).  All image
tensors are single images in (height, width, channels) layout.
"""
import numpy as np


def im2col3x3(x):
    """Unfold 3x3 same-padded neighbourhoods into rows of a (H*W, 9*C) matrix.

    Column order is (dr, dc, channel), matching a weight array of shape
    (3, 3, C_in, C_out) reshaped to (9 * C_in, C_out).
    """
    h, w, c = x.shape
    xp = np.zeros((h + 2, w + 2, c), dtype=x.dtype)
    xp[1:-1, 1:-1] = x
    cols = np.empty((h, w, 3, 3, c), dtype=x.dtype)
    for dr in range(3):
        for dc in range(3):
            cols[:, :, dr, dc, :] = xp[dr:dr + h, dc:dc + w, :]
    return cols.reshape(h * w, 9 * c)


def col2im3x3(dcols, h, w, c):
    """Adjoint of :func:`im2col3x3`: fold column gradients back onto the image."""
    d = np.ascontiguousarray(dcols).reshape(h, w, 3, 3, c)
    dxp = np.zeros((h + 2, w + 2, c), dtype=d.dtype)
    for dr in range(3):
        for dc in range(3):
            dxp[dr:dr + h, dc:dc + w, :] += d[:, :, dr, dc, :]
    return np.ascontiguousarray(dxp[1:-1, 1:-1])


def maxpool2_forward(x):
    """2x2/stride-2 max pooling.

    Returns the pooled map and the winning offset (0..3, row-major inside the
    window) per output element.  Ties go to the first offset.
    """
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3)
    win = win.reshape(h // 2, w // 2, c, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx):
    h2, w2, c = dy.shape
    dwin = np.zeros((h2, w2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = dwin.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2)
    return np.ascontiguousarray(dx.reshape(2 * h2, 2 * w2, c))


def deconv_scatter(cols, stride):
    """Overlap-add the per-pixel kernel responses of a transposed convolution.

    ``cols`` has shape (h, w, 2s, 2s, C) where s = ``stride``; the kernel is
    twice the stride and the output is cropped by s/2 on every side so that
    the result is exactly (h*s, w*s, C).
    """
    h, w, k, _, c = cols.shape
    s = stride
    p = s // 2
    c7 = cols.reshape(h, w, 2, s, 2, s, c)
    full = np.zeros((h + 1, s, w + 1, s, c), dtype=cols.dtype)
    for qr in range(2):
        for qc in range(2):
            full[qr:qr + h, :, qc:qc + w, :, :] += c7[:, :, qr, :, qc, :, :].transpose(0, 2, 1, 3, 4)
    full = full.reshape((h + 1) * s, (w + 1) * s, c)
    return np.ascontiguousarray(full[p:p + h * s, p:p + w * s])


def deconv_gather(dout, stride, h, w):
    """Adjoint of :func:`deconv_scatter`."""
    s = stride
    p = s // 2
    c = dout.shape[2]
    full = np.zeros(((h + 1) * s, (w + 1) * s, c), dtype=dout.dtype)
    full[p:p + h * s, p:p + w * s] = dout
    f5 = full.reshape(h + 1, s, w + 1, s, c)
    cols = np.empty((h, w, 2, s, 2, s, c), dtype=dout.dtype)
    for qr in range(2):
        for qc in range(2):
            cols[:, :, qr, :, qc, :, :] = f5[qr:qr + h, :, qc:qc + w, :, :].transpose(0, 2, 1, 3, 4)
    return cols.reshape(h, w, 2 * s, 2 * s, c)


def kmeans_assign(points, centers):
    """Index of the nearest center (squared Euclidean, ties to the lowest index)."""
    d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1).astype(np.intp)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    """In-place Adam step on flat arrays (bias corrections c1, c2 precomputed)."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def softmax_xent(z, labels):
    """Mean cross-entropy of row-wise softmax of ``z`` (n, c) and its gradient."""
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0].astype(np.float64)) - (z[rows, labels] - zmax[:, 0])))
    d = e / s
    d[rows, labels] -= 1.0
    d /= n
    return loss, d
