"""Low-level linear image operators used by the regularizer network.

All arrays here use the channel-major layout ``(C, B, H, W)`` so that a 3x3
convolution reduces to one matrix product against a stack of shifted copies.
"""

import numpy as np

_BLUR = np.array([0.25, 0.5, 0.25])


def pad(a, mode):
    """Pad the two spatial axes by one pixel (``mode`` is 'zero' or 'edge')."""
    if mode not in ("zero", "edge"):
        raise ValueError(f"unknown padding mode {mode!r}")
    c, b, h, w = a.shape
    p = np.zeros((c, b, h + 2, w + 2))
    p[:, :, 1:-1, 1:-1] = a
    if mode == "edge":
        p[:, :, 0, 1:-1] = a[:, :, 0]
        p[:, :, -1, 1:-1] = a[:, :, -1]
        p[:, :, :, 0] = p[:, :, :, 1]
        p[:, :, :, -1] = p[:, :, :, -2]
    return p


def pad_adjoint(p, mode):
    if mode == "zero":
        return p[:, :, 1:-1, 1:-1].copy()
    if mode == "edge":
        q = p.copy()
        q[:, :, 1, :] += q[:, :, 0, :]
        q[:, :, -2, :] += q[:, :, -1, :]
        q[:, :, :, 1] += q[:, :, :, 0]
        q[:, :, :, -2] += q[:, :, :, -1]
        return q[:, :, 1:-1, 1:-1].copy()
    raise ValueError(f"unknown padding mode {mode!r}")


def _cols(a, mode):
    # (3, 3, C, B, H, W) stack of shifted copies
    c, b, h, w = a.shape
    p = pad(a, mode)
    cols = np.empty((3, 3, c, b, h, w))
    for i in range(3):
        for j in range(3):
            cols[i, j] = p[:, :, i:i + h, j:j + w]
    return cols.reshape(9 * c, b * h * w)


def _wmat(weight):
    o, c = weight.shape[:2]
    return weight.transpose(0, 2, 3, 1).reshape(o, 9 * c)


def conv3x3(a, weight, mode="zero"):
    """Cross-correlate ``a`` (C, B, H, W) with ``weight`` (O, C, 3, 3), same size."""
    _, b, h, w = a.shape
    return (_wmat(weight) @ _cols(a, mode)).reshape(weight.shape[0], b, h, w)


def conv3x3_adjoint(out_bar, weight, mode="zero"):
    """Adjoint of :func:`conv3x3` with respect to its input."""
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    if mode == "zero":
        return conv3x3(out_bar, flipped, "zero")
    o, b, h, w = out_bar.shape
    big = np.zeros((o, b, h + 2, w + 2))
    big[:, :, 1:-1, 1:-1] = out_bar
    return pad_adjoint(conv3x3(big, flipped, "zero"), mode)


def conv3x3_weight_grad(a, out_bar, mode="zero"):
    """Gradient of ``<out_bar, conv3x3(a, W)>`` with respect to ``W``."""
    o = out_bar.shape[0]
    c = a.shape[0]
    g = out_bar.reshape(o, -1) @ _cols(a, mode).T
    return g.reshape(o, 3, 3, c).transpose(0, 3, 1, 2).copy()


def blur(a):
    """Separable binomial [1,2,1]/4 blur with zero boundary; self-adjoint."""
    out = _BLUR[1] * a
    out[:, :, 1:, :] += _BLUR[0] * a[:, :, :-1, :]
    out[:, :, :-1, :] += _BLUR[2] * a[:, :, 1:, :]
    res = _BLUR[1] * out
    res[:, :, :, 1:] += _BLUR[0] * out[:, :, :, :-1]
    res[:, :, :, :-1] += _BLUR[2] * out[:, :, :, 1:]
    return res


def zero_insert(a):
    c, b, h, w = a.shape
    out = np.zeros((c, b, 2 * h, 2 * w))
    out[:, :, ::2, ::2] = a
    return out


def blur_down(a):
    """Anti-aliased stride-2 subsampling."""
    return blur(a)[:, :, ::2, ::2].copy()


def blur_down_adjoint(a):
    return blur(zero_insert(a))


def blur_up(a):
    """Stride-2 zero insertion followed by the (rescaled) binomial blur."""
    return 4.0 * blur(zero_insert(a))


def blur_up_adjoint(a):
    return 4.0 * blur(a)[:, :, ::2, ::2]
