"""Plain-Python reference implementations for the loss terms.

Everything here works on nested lists with ``math``; nothing is shared with
the package except the parameter values read out of a bundle.
"""
from __future__ import annotations

import math
import statistics

EPS = 1e-12


def _rows(a):
    return [list(map(float, r)) for r in a]


def affine(row, W, b):
    W = _rows(W)
    return [sum(row[i] * W[i][j] for i in range(len(row))) + float(b[j]) for j in range(len(b))]


def relu(row):
    return [max(v, 0.0) for v in row]


def softmax(z):
    mx = max(z)
    e = [math.exp(v - mx) for v in z]
    s = sum(e)
    return [v / s for v in e]


def clamp(p):
    return min(max(p, EPS), 1 - EPS)


def cross_entropy(prob_rows, labels):
    return -sum(math.log(clamp(p[y])) for p, y in zip(prob_rows, labels)) / len(labels)


def params(bundle, prefix):
    return {k.split(".", 1)[1]: v.data for k, v in bundle.named_parameters() if k.startswith(prefix + ".")}


def classification(bundle, feats, y):
    rows = []
    for i in range(len(y)):
        z = None
        for m, f in enumerate(feats):
            g = params(bundle, f"G{m}")
            lg = affine(list(f[i]), g["W"], g["b"])
            z = lg if z is None else [a + b for a, b in zip(z, lg)]
        rows.append(softmax(z))
    return cross_entropy(rows, y)


def discriminator_probs(bundle, m, feat):
    p = params(bundle, f"D{m}")
    out = []
    for row in _rows(feat):
        h = relu(affine(row, p["W1"], p["b1"]))
        z = affine(h, p["W2"], p["b2"])[0]
        out.append(1 / (1 + math.exp(-z)))
    return out


def binary_ce(probs, d):
    return -sum(t * math.log(clamp(p)) + (1 - t) * math.log(clamp(1 - p)) for p, t in zip(probs, d)) / len(d)


def domain(bundle, m, feat, d):
    return binary_ce(discriminator_probs(bundle, m, feat), d)


def correspondence(bundle, feats, c):
    p = params(bundle, "C")
    rows = []
    for i in range(len(c)):
        cat = [float(v) for f in feats for v in f[i]]
        h = relu(affine(cat, p["W1"], p["b1"]))
        rows.append(softmax(affine(h, p["W2"], p["b2"])))
    return cross_entropy(rows, c)


def sq_dist(a, b):
    return sum((x - y) ** 2 for x, y in zip(a, b))


def median_sq(X, Y):
    Z = _rows(X) + _rows(Y)
    return statistics.median(sq_dist(Z[i], Z[j]) for i in range(len(Z)) for j in range(i + 1, len(Z)))


def mmd2(X, Y, sigma2s):
    X, Y = _rows(X), _rows(Y)

    def k(a, b):
        d = sq_dist(a, b)
        return sum(math.exp(-d / (2 * s)) for s in sigma2s) / len(sigma2s)

    def block(A, B):
        return sum(k(a, b) for a in A for b in B) / (len(A) * len(B))

    return block(X, X) + block(Y, Y) - 2 * block(X, Y)


def mmd_loss(X, Y, multipliers):
    base = median_sq(X, Y)
    base = base if base > 0 else 1.0
    return mmd2(X, Y, [base * m for m in multipliers])


def mcd(P1, P2):
    return sum(sum(abs(a - b) for a, b in zip(r1, r2)) for r1, r2 in zip(_rows(P1), _rows(P2))) / len(P1)
