"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels`` (Cython) mirrors every
function here with the same signature.
"""
import numpy as np


def softmax_masked_fwd(x, mask):
    """Row softmax of ``x + mask`` over the last axis.

    ``x`` has shape (B, n, k) and ``mask`` shape (n, k); the mask is applied
    to every leading slice.
    """
    z = x + mask
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_masked_bwd(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def layer_norm_fwd(x, gain, bias, eps):
    """Normalize rows of the 2-D array ``x``. Returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), \
        rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_bwd(gy, xhat, rstd, gain):
    d = xhat.shape[1]
    g_gain = (gy * xhat).sum(axis=0)
    g_bias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = (gxhat - gxhat.mean(axis=1, keepdims=True)
          - xhat * (gxhat * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return gx.astype(gy.dtype, copy=False), g_gain, g_bias


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] > prev[j] else prev[j]
        prev = cur
    return prev[-1]
