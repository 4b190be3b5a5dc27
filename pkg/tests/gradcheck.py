"""Finite-difference oracle for random graphs.

A graph is a list of layer specs.  It is built twice: once with the autodiff
core, once as a plain numpy function of a flat parameter vector.  The numpy
version never touches ``mmsada``; gradient reversal is evaluated as
``x0 - s * (x - x0)`` around the unperturbed activation ``x0`` so central
differences see the reversed slope.
"""
from __future__ import annotations

import numpy as np

from mmsada import diffcore as dc

OPS = ("linear", "relu", "batch_norm", "grl")
STEP = 1e-5
KINK = 1e-5


def random_graph(rng: np.random.Generator, max_depth: int = 6, max_width: int = 16):
    B = int(rng.integers(3, 9))
    width = int(rng.integers(2, max_width + 1))
    layers, params = [], []
    x = rng.standard_normal((B, width))
    depth = int(rng.integers(1, max_depth + 1))
    for i in range(depth):
        op = "linear" if i == 0 else OPS[int(rng.integers(0, len(OPS)))]
        if op == "linear":
            out = int(rng.integers(2, max_width + 1))
            params.append(rng.standard_normal((width, out)) / np.sqrt(width))
            params.append(0.1 * rng.standard_normal(out))
            layers.append(("linear", len(params) - 2))
            width = out
        elif op == "batch_norm":
            params.append(1.0 + 0.1 * rng.standard_normal(width))
            params.append(0.1 * rng.standard_normal(width))
            layers.append(("batch_norm", len(params) - 2))
        elif op == "grl":
            layers.append(("grl", float(rng.choice([0.5, 1.0, 2.0]))))
        else:
            layers.append(("relu", None))
    K = int(rng.integers(2, 6))
    params.append(rng.standard_normal((width, K)) / np.sqrt(width))
    params.append(np.zeros(K))
    layers.append(("linear", len(params) - 2))
    labels = rng.integers(0, K, size=B)
    return x, layers, params, labels


def autodiff_grads(x, layers, params, labels):
    xt = dc.parameter(x)
    pt = [dc.parameter(p) for p in params]
    h = xt
    for op, arg in layers:
        if op == "linear":
            h = dc.linear(h, pt[arg], pt[arg + 1])
        elif op == "relu":
            h = dc.relu(h)
        elif op == "batch_norm":
            st = dc.BatchNormState.fresh(h.shape[1])
            h = dc.batch_norm(h, st, dc.TRAIN, pt[arg], pt[arg + 1])
        elif op == "grl":
            h = dc.gradient_reversal(h, arg)
    loss = dc.cross_entropy(dc.softmax(h), labels)
    dc.backward(loss)
    return loss.item(), [xt.grad] + [p.grad for p in pt]


def numpy_forward(x, layers, params, labels, anchors=None, eps=1e-5):
    """Loss and relu pre-activations; records GRL inputs into ``anchors`` when it is a list."""
    h = x
    pre = []
    k = 0
    for op, arg in layers:
        if op == "linear":
            h = h @ params[arg] + params[arg + 1]
        elif op == "relu":
            pre.append(h.copy())
            h = np.maximum(h, 0.0)
        elif op == "batch_norm":
            mu = h.mean(axis=0)
            var = ((h - mu) ** 2).mean(axis=0)
            h = (h - mu) / np.sqrt(var + eps) * params[arg] + params[arg + 1]
        elif op == "grl":
            if isinstance(anchors, list) and len(anchors) <= k:
                anchors.append(h.copy())
                h = h.copy()
            else:
                x0 = anchors[k]
                h = x0 - arg * (h - x0)
            k += 1
    z = h - h.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean(), pre


def check_graph(x, layers, params, labels, rel_tol=1e-4, floor=1e-5):
    """Compare every coordinate; returns (n_checked, n_ok, n_excluded)."""
    _, analytic = autodiff_grads(x, layers, params, labels)
    anchors: list = []
    numpy_forward(x, layers, params, labels, anchors)
    tensors = [x] + list(params)
    _, pre0 = numpy_forward(x, layers, params, labels, anchors)
    # an activation sitting on a kink makes the one-sided slopes differ
    on_kink = any(np.any((np.abs(p) < KINK) & (p != 0)) for p in pre0)
    checked = ok = excluded = 0
    for ti, base in enumerate(tensors):
        for idx in np.ndindex(base.shape):
            vals, signs = [], []
            for sgn in (1.0, -1.0):
                pert = [t.copy() for t in tensors]
                pert[ti][idx] += sgn * STEP
                loss, pre = numpy_forward(pert[0], layers, pert[1:], labels, anchors)
                vals.append(loss)
                signs.append([p > 0 for p in pre])
            crossed = any(np.any(a != b) for a, b in zip(*signs))
            if crossed or on_kink:
                excluded += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * STEP)
            a = analytic[ti][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            ok += err <= rel_tol
    return checked, ok, excluded
