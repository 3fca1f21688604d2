"""Pure numpy implementations of the hot convolution kernels.

These mirror the compiled routines in ``_kernels.pyx`` one for one and are
used whenever the extension is not built (or ``WAVECORR_PURE_PYTHON=1``).

Array conventions
-----------------
x : (m, L, c_in) activations, assets x time x channels
W : (c_out, c_in, k) conv weights; tap ``k - 1`` reads the present step
b : (c_out,) bias
"""
import numpy as np


def conv_forward(x, W, b, dilation, start):
    m, L, _ = x.shape
    c_out, _, k = W.shape
    pad = (k - 1) * dilation
    n_out = L - start
    xp = np.zeros((m, L + pad, x.shape[2]))
    xp[:, pad:, :] = x
    out = np.empty((m, n_out, c_out))
    out[...] = b
    for tap in range(k):
        lo = start + tap * dilation
        out += xp[:, lo:lo + n_out, :] @ W[:, :, tap].T
    return out


def conv_backward(gout, x, W, dilation, start):
    m, L, c_in = x.shape
    _, _, k = W.shape
    pad = (k - 1) * dilation
    n_out = L - start
    xp = np.zeros((m, L + pad, c_in))
    xp[:, pad:, :] = x
    gxp = np.zeros_like(xp)
    gW = np.empty_like(W)
    g2 = gout.reshape(-1, gout.shape[2])
    for tap in range(k):
        lo = start + tap * dilation
        sl = xp[:, lo:lo + n_out, :]
        gxp[:, lo:lo + n_out, :] += gout @ W[:, :, tap]
        gW[:, :, tap] = g2.T @ sl.reshape(-1, c_in)
    gb = g2.sum(axis=0)
    return gxp[:, pad:, :], gW, gb


def corr_forward(x, w, b):
    """Corr layer closed form. ``w`` is (m + 1, d); row 0 weighs the own row."""
    own = x @ w[0]
    cross = np.einsum("kjc,kc->j", x, w[1:])
    return own + cross[None, :] + b


def corr_backward(gout, x, w):
    gsum = gout.sum(axis=0)
    gx = gout[:, :, None] * w[0][None, None, :] + gsum[None, :, None] * w[1:][:, None, :]
    gw = np.empty_like(w)
    gw[0] = np.einsum("ij,ijc->c", gout, x)
    gw[1:] = np.einsum("j,kjc->kc", gsum, x)
    return gx, gw, gout.sum()
