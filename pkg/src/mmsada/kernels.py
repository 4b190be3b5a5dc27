"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``MMSADA_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("MMSADA_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as _impl  # type: ignore[no-redef]
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py


def _c2(a):
    return a.ndim == 2 and a.dtype == np.float64 and a.flags.c_contiguous


# softmax_rows and rbf_mixture stay on numpy: its vectorised exp beats the
# scalar libm loop in the extension (see benchmarks/bench_kernels.py)

def softmax_rows(z):
    return _kernels_py.softmax_rows(z)


def bn_forward(x, eps):
    return _impl.bn_forward(x, eps) if _c2(x) else _kernels_py.bn_forward(x, eps)


def bn_backward(g, xhat, inv_std):
    return _impl.bn_backward(g, xhat, inv_std)


def sq_dists(a, b):
    return _impl.sq_dists(a, b)


def rbf_mixture(d, bandwidths):
    return _kernels_py.rbf_mixture(d, bandwidths)


def gather_windows(seqs, seg_idx, starts, window_len):
    if seqs.ndim == 3 and seqs.dtype == np.float64 and seqs.flags.c_contiguous:
        return _impl.gather_windows(seqs, seg_idx, starts, window_len)
    return _kernels_py.gather_windows(seqs, seg_idx, starts, window_len)


def relu_forward(x):
    return _impl.relu_forward(x) if _c2(x) else _kernels_py.relu_forward(x)


def relu_backward(g, out):
    return _impl.relu_backward(g, out) if _c2(out) else _kernels_py.relu_backward(g, out)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps, weight_decay):
    """In-place Adam step; every array must be C-contiguous float64."""
    _impl.adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps, weight_decay)
