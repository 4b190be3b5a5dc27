"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels_c`` (Cython) must agree with
them to rounding error.
"""
import numpy as np


def softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def bn_forward(x, eps):
    mu = x.mean(axis=0)
    xc = x - mu
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    return xc * inv_std, mu, var, inv_std


def bn_backward(g, xhat, inv_std):
    B = g.shape[0]
    gsum = g.sum(axis=0)
    gx = (g * xhat).sum(axis=0)
    return (inv_std / B) * (B * g - gsum - xhat * gx)


def sq_dists(a, b):
    """Pairwise squared euclidean distances between rows of a and b."""
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def rbf_mixture(d, bandwidths):
    """sum_j exp(-d / bw_j) / len(bandwidths), elementwise over d."""
    out = np.zeros_like(d)
    for bw in bandwidths:
        out += np.exp(-d / bw)
    out /= len(bandwidths)
    return out


def gather_windows(seqs, seg_idx, starts, window_len):
    """Stack flattened windows ``seqs[s, t0:t0+W, :]`` into a (n, W*D) matrix."""
    offs = np.asarray(starts)[:, None] + np.arange(window_len)[None, :]
    win = seqs[np.asarray(seg_idx)[:, None], offs]
    return win.reshape(len(starts), -1)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(g, out):
    return np.where(out > 0.0, g, 0.0)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps, weight_decay):
    """In-place bias-corrected Adam step on flat-compatible arrays."""
    if weight_decay:
        g = g + weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += eps
    p -= (lr / c1) * m / denom
