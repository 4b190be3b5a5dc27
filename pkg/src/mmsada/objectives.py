"""Training objectives.

Conventions: domain bit ``d = 1`` marks source, ``d = 0`` target; the
correspondence bit ``c = 1`` marks modalities drawn from the same action.
All log terms see probabilities clamped to ``[1e-12, 1 - 1e-12]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tensor, ContractError, DimensionError

MMD_MULTIPLIERS = (1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0)


class SampleSizeError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_d: float = 1.0
    lambda_c: float = 5.0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_c < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


# ---------------------------------------------------------------- classification

def fused_probs(logits: Sequence[Tensor]) -> Tensor:
    """softmax of the summed per-modality scores."""
    total = logits[0]
    for lg in logits[1:]:
        total = dc.add(total, lg)
    return dc.softmax(total)


def fused_classification_loss(logits: Sequence[Tensor], y) -> Tensor:
    return dc.cross_entropy(fused_probs(logits), y)


def classification_loss(bundle, feats: Sequence[Tensor], y, d=None, c=None, head: int = 0) -> Tensor:
    """Cross-entropy of the late-fused prediction on corresponding source examples.

    ``d`` and ``c``, when given, are checked: every row must be a source
    example whose modalities correspond.
    """
    y = np.asarray(y)
    if d is not None and np.any(np.asarray(d) != 1):
        raise ContractError("classification loss received target-domain examples")
    if c is not None and np.any(np.asarray(c) != 1):
        raise ContractError("classification loss received non-corresponding examples")
    if y.size == 0:
        raise ContractError("classification loss on an empty batch")
    if np.any(y < 0):
        raise ContractError("classification loss received unlabelled examples")
    logits = [bundle.classify(m, f, head) for m, f in enumerate(feats)]
    return fused_classification_loss(logits, y)


# ---------------------------------------------------------------- domain adversarial

def domain_bce(probs: Tensor, d) -> Tensor:
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ContractError("domain loss on an empty batch")
    return dc.binary_cross_entropy(dc.reshape(probs, (-1,)), d)


def adversarial_domain_loss(bundle, m: int, feat: Tensor, d, grl_scale: float = 1.0) -> Tensor:
    """Discriminator loss for modality m behind a gradient reversal.

    Minimising the returned scalar trains D_m to tell domains apart while
    the reversed gradient pushes F_m towards domain-confusing features.
    """
    if np.asarray(d).size == 0:
        raise ContractError("domain loss on an empty batch")
    probs = bundle.discriminate(m, dc.gradient_reversal(feat, grl_scale))
    return domain_bce(probs, d)


# ---------------------------------------------------------------- correspondence

def correspondence_loss(bundle, feats: Sequence[Tensor], c) -> Tensor:
    """Two-class cross-entropy of the correspondence head against ``c``.

    Both the ``c = 1`` and ``c = 0`` terms contribute; with the positive term
    alone the head could trivially answer "corresponding" everywhere.
    """
    c = np.asarray(c, dtype=np.intp).reshape(-1)
    if c.size == 0:
        raise ContractError("correspondence loss on an empty batch")
    return dc.cross_entropy(bundle.correspond(feats), c)


# ---------------------------------------------------------------- combination

def combine(loss_y: Tensor | None, loss_d: Sequence[Tensor], loss_c: Tensor | None,
            weights: LossWeights) -> tuple[Tensor, dict]:
    """L_y + lambda_d * sum_m L_d^m + lambda_c * L_c, plus a float breakdown."""
    terms = []
    breakdown = {"loss_y": 0.0, "loss_d": [0.0] * max(len(loss_d), 1), "loss_c": 0.0}
    if loss_y is not None:
        terms.append(loss_y)
        breakdown["loss_y"] = loss_y.item()
    if loss_d and weights.lambda_d > 0:
        for lt in loss_d:
            terms.append(dc.scale(lt, weights.lambda_d))
        breakdown["loss_d"] = [lt.item() for lt in loss_d]
    if loss_c is not None and weights.lambda_c > 0:
        terms.append(dc.scale(loss_c, weights.lambda_c))
        breakdown["loss_c"] = loss_c.item()
    if not terms:
        raise ContractError("objective has no active terms")
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    breakdown["total"] = total.item()
    return total, breakdown


def weighted_total(loss_y: float, loss_d: Sequence[float], loss_c: float, weights: LossWeights) -> float:
    return loss_y + weights.lambda_d * float(sum(loss_d)) + weights.lambda_c * loss_c


def batch_features(bundle, batch, mode: str = dc.TRAIN, rng=None) -> list[Tensor]:
    return [bundle.features(m, batch.x[m], mode, rng) for m in range(bundle.cfg.n_modalities)]


def total_loss(bundle, batch, weights: LossWeights, rng=None, mode: str = dc.TRAIN,
               alignment: str = "adversarial", feats: Sequence[Tensor] | None = None
               ) -> tuple[Tensor, dict]:
    """Joint objective on one composed batch.

    The classification term only sees the corresponding source rows; both
    alignment terms see every row.  ``alignment="mmd"`` swaps each
    discriminator loss for the multi-kernel MMD between source and target
    features of that modality.
    """
    if feats is None:
        feats = batch_features(bundle, batch, mode, rng)
    M = len(feats)
    elig = batch.eligible
    loss_y = None
    if elig.size:
        loss_y = classification_loss(bundle, [dc.take_rows(f, elig) for f in feats],
                                     batch.y[elig], batch.d[elig], batch.c[elig])
    loss_d = []
    if weights.lambda_d > 0:
        if alignment == "adversarial":
            loss_d = [adversarial_domain_loss(bundle, m, feats[m], batch.d) for m in range(M)]
        elif alignment == "mmd":
            src, tgt = batch.source_rows, batch.target_rows
            loss_d = [mmd_loss(dc.take_rows(feats[m], src), dc.take_rows(feats[m], tgt))
                      for m in range(M)]
        else:
            raise ValueError(f"unknown alignment {alignment!r}")
    loss_c = correspondence_loss(bundle, feats, batch.c) if weights.lambda_c > 0 else None
    total, breakdown = combine(loss_y, loss_d, loss_c, weights)
    if len(breakdown["loss_d"]) < M:
        breakdown["loss_d"] = [0.0] * M
    return total, breakdown


# ---------------------------------------------------------------- MMD

def median_sq_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Median squared distance over distinct pairs of the pooled sample."""
    z = np.concatenate([x, y], axis=0)
    d = kernels.sq_dists(z, z)
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0 else 1.0


def _mmd_block(a: np.ndarray, b: np.ndarray, sigma2s: np.ndarray, drop_diag: bool):
    """Mean mixture-kernel value between rows of a and b, and its slope wrt each d_ij."""
    d = kernels.sq_dists(a, b)
    widths = 2.0 * sigma2s
    k = kernels.rbf_mixture(d, widths)
    slope = np.zeros_like(d)
    for w in widths:
        slope -= np.exp(-d / w) / w
    slope /= len(widths)
    if drop_diag:
        n = len(a)
        np.fill_diagonal(k, 0.0)
        np.fill_diagonal(slope, 0.0)
        denom = n * (n - 1)
    else:
        denom = d.size
    return k.sum() / denom, slope / denom


def mmd2(x: Tensor, y: Tensor, sigma2s, unbiased: bool = False) -> Tensor:
    """Squared MMD under a mixture of kernels ``exp(-|a-b|^2 / (2 sigma^2))``.

    Biased (V-statistic) by default, which is never negative.
    """
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"mmd: incompatible sample shapes {x.shape} and {y.shape}")
    if unbiased and (len(x.data) < 2 or len(y.data) < 2):
        raise SampleSizeError("unbiased MMD needs at least two samples per side")
    s2 = np.atleast_1d(np.asarray(sigma2s, dtype=np.float64))
    xd, yd = x.data, y.data
    kxx, gxx = _mmd_block(xd, xd, s2, unbiased)
    kyy, gyy = _mmd_block(yd, yd, s2, unbiased)
    kxy, gxy = _mmd_block(xd, yd, s2, False)
    value = kxx + kyy - 2.0 * kxy

    def bw(g):
        # d(d_ij)/d(a_i) = 2 (a_i - b_j); the self blocks are symmetric so both
        # arguments contribute equally
        dx = 4.0 * (xd * gxx.sum(axis=1, keepdims=True) - gxx @ xd)
        dx -= 4.0 * (xd * gxy.sum(axis=1, keepdims=True) - gxy @ yd)
        dy = 4.0 * (yd * gyy.sum(axis=1, keepdims=True) - gyy @ yd)
        dy -= 4.0 * (yd * gxy.sum(axis=0)[:, None] - gxy.T @ xd)
        return g * dx, g * dy

    return dc._make(np.array(value), (x, y), bw)


def mmd_loss(source_feats, target_feats, multipliers=MMD_MULTIPLIERS, unbiased: bool = False,
             base_sigma2: float | None = None) -> Tensor:
    """Multi-kernel MMD with bandwidths = median pairwise squared distance x multipliers."""
    s, t = dc.as_tensor(source_feats), dc.as_tensor(target_feats)
    if len(s.data) < 2 or len(t.data) < 2:
        raise SampleSizeError(f"mmd needs >= 2 samples per side, got {len(s.data)} and {len(t.data)}")
    if base_sigma2 is None:
        base_sigma2 = median_sq_distance(s.data, t.data)
    return mmd2(s, t, base_sigma2 * np.asarray(multipliers, dtype=np.float64), unbiased)


# ---------------------------------------------------------------- MCD

def mcd_discrepancy(probs1: Tensor, probs2: Tensor) -> Tensor:
    """Mean over rows of the L1 distance between two prediction rows."""
    if probs1.shape != probs2.shape:
        raise DimensionError(f"mcd: prediction shapes {probs1.shape} and {probs2.shape} differ")
    diff = dc.absolute(dc.add(probs1, dc.neg(probs2)))
    return dc.mean(dc.tsum(diff, axis=1))
