"""The four network roles: per-modality feature extractors, classifiers and
domain discriminators, plus the shared correspondence head.

Parameter names follow ``<role><modality>.<layer>``, e.g. ``F0.W1``,
``G1.b``, ``D0.W2``, ``C.W1``; the optional second classifier heads used by
MCD are ``H<m>.W`` / ``H<m>.b``.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, fields
from typing import Sequence

import numpy as np

from . import diffcore as dc
from ._io import atomic_write_text
from .diffcore import Tensor, DimensionError, BatchNormState

HEAD_HIDDEN = 100
# feature width of the original backbone; the desk-scale default is far smaller
FULL_SCALE_FEAT_DIM = 1024


@dataclass
class NetConfig:
    n_modalities: int = 2
    input_dims: tuple = (12, 12)
    window_len: int = 16
    hidden: int = 128
    feat_dim: int = 64
    n_classes: int = 8
    dropout: float = 0.5
    head_hidden: int = HEAD_HIDDEN
    mcd_heads: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if len(self.input_dims) != self.n_modalities:
            raise ValueError("need one input dim per modality")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelBundle:
    def __init__(self, cfg: NetConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self.bn: list[BatchNormState] = []
        M, H, Fd, K, Hh = cfg.n_modalities, cfg.hidden, cfg.feat_dim, cfg.n_classes, cfg.head_hidden

        def lin(prefix, i, o, w="W", b="b"):
            self.params[f"{prefix}.{w}"] = dc.parameter(_uniform(rng, i, (i, o)), f"{prefix}.{w}")
            self.params[f"{prefix}.{b}"] = dc.parameter(np.zeros(o), f"{prefix}.{b}")

        for m in range(M):
            lin(f"F{m}", cfg.window_len * cfg.input_dims[m], H, "W1", "b1")
            self.params[f"F{m}.gamma"] = dc.parameter(np.ones(H), f"F{m}.gamma")
            self.params[f"F{m}.beta"] = dc.parameter(np.zeros(H), f"F{m}.beta")
            lin(f"F{m}", H, Fd, "W2", "b2")
            self.bn.append(BatchNormState.fresh(H, cfg.bn_momentum, cfg.bn_eps))
        for m in range(M):
            lin(f"G{m}", Fd, K)
        if cfg.mcd_heads:
            for m in range(M):
                lin(f"H{m}", Fd, K)
        for m in range(M):
            lin(f"D{m}", Fd, Hh, "W1", "b1")
            lin(f"D{m}", Hh, 1, "W2", "b2")
        lin("C", M * Fd, Hh, "W1", "b1")
        lin("C", Hh, 2, "W2", "b2")

    # ------------------------------------------------------------ plumbing

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        dc.zero_grads(self.params.values())

    def zero_head(self, prefix: str) -> None:
        """Zero every parameter of one head (test fixtures and ablations)."""
        for k, p in self.params.items():
            if k.startswith(prefix + "."):
                p.data[...] = 0.0

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def _check_modality(self, m: int) -> None:
        if not 0 <= m < self.cfg.n_modalities:
            raise IndexError(f"modality {m} out of range for {self.cfg.n_modalities} modalities")

    def _check_feat(self, feat: Tensor) -> None:
        if feat.data.ndim != 2 or feat.shape[1] != self.cfg.feat_dim:
            raise DimensionError(f"feature shape {feat.shape} does not end in feat_dim={self.cfg.feat_dim}")

    # ------------------------------------------------------------ roles

    def features(self, m: int, x, mode: str = dc.EVAL,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Encode a batch of flattened windows (B, window_len*input_dim) for modality m."""
        self._check_modality(m)
        x = dc.as_tensor(x)
        want = self.cfg.window_len * self.cfg.input_dims[m]
        if x.data.ndim != 2 or x.shape[1] != want:
            raise DimensionError(f"modality {m} expects windows flattened to {want}, got {x.shape}")
        p = self.params
        h = dc.relu(dc.linear(x, p[f"F{m}.W1"], p[f"F{m}.b1"]))
        h = dc.batch_norm(h, self.bn[m], mode, p[f"F{m}.gamma"], p[f"F{m}.beta"])
        h = dc.relu(dc.linear(h, p[f"F{m}.W2"], p[f"F{m}.b2"]))
        return dc.dropout(h, self.cfg.dropout, mode, rng)

    def feature_extract(self, m: int, window, mode: str = dc.EVAL,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Feature of a single :class:`WindowSample`, shape (feat_dim,)."""
        self._check_modality(m)
        w = np.asarray(window.windows[m], dtype=np.float64)
        if w.shape != (self.cfg.window_len, self.cfg.input_dims[m]):
            raise DimensionError(f"window {w.shape} does not match "
                                 f"({self.cfg.window_len}, {self.cfg.input_dims[m]})")
        return dc.reshape(self.features(m, w.reshape(1, -1), mode, rng), (self.cfg.feat_dim,))

    def classify(self, m: int, feat: Tensor, head: int = 0) -> Tensor:
        """Raw logits (B, K); softmax happens after fusion."""
        self._check_modality(m)
        feat = _batched(feat)
        self._check_feat(feat)
        role = "G" if head == 0 else "H"
        return dc.linear(feat, self.params[f"{role}{m}.W"], self.params[f"{role}{m}.b"])

    def fused_logits(self, feats: Sequence[Tensor], head: int = 0) -> Tensor:
        out = self.classify(0, feats[0], head)
        for m in range(1, len(feats)):
            out = dc.add(out, self.classify(m, feats[m], head))
        return out

    def discriminate(self, m: int, feat: Tensor) -> Tensor:
        """Probability of the source domain, shape (B, 1)."""
        self._check_modality(m)
        feat = _batched(feat)
        self._check_feat(feat)
        p = self.params
        h = dc.relu(dc.linear(feat, p[f"D{m}.W1"], p[f"D{m}.b1"]))
        return dc.sigmoid(dc.linear(h, p[f"D{m}.W2"], p[f"D{m}.b2"]))

    def correspond(self, feats: Sequence[Tensor]) -> Tensor:
        """Two-way softmax (not corresponding, corresponding) over concatenated features."""
        if len(feats) != self.cfg.n_modalities:
            raise DimensionError(f"correspond needs {self.cfg.n_modalities} features, got {len(feats)}")
        feats = [_batched(f) for f in feats]
        for f in feats:
            self._check_feat(f)
        p = self.params
        h = dc.relu(dc.linear(dc.concat(feats, axis=1), p["C.W1"], p["C.b1"]))
        return dc.softmax(dc.linear(h, p["C.W2"], p["C.b2"]))

    # ------------------------------------------------------------ state

    def bn_snapshot(self) -> list[BatchNormState]:
        return [s.copy() for s in self.bn]

    def with_bn(self, states: Sequence[BatchNormState]) -> "ModelBundle":
        """Shallow copy sharing parameters but carrying its own BN statistics."""
        clone = object.__new__(ModelBundle)
        clone.cfg = self.cfg
        clone.params = self.params
        clone.bn = [s.copy() for s in states]
        return clone

    def copy(self) -> "ModelBundle":
        clone = object.__new__(ModelBundle)
        clone.cfg = self.cfg
        clone.params = {k: dc.parameter(v.data.copy(), k) for k, v in self.params.items()}
        clone.bn = self.bn_snapshot()
        return clone


def _batched(t: Tensor) -> Tensor:
    t = dc.as_tensor(t)
    return dc.reshape(t, (1, -1)) if t.data.ndim == 1 else t


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = "MMSADA-CKPT 1"


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Text checkpoint.

    Line 1 is the magic ``MMSADA-CKPT 1``; line 2 ``config`` followed by
    ``key=value`` pairs of :class:`NetConfig`; every further line is one
    record ``<name> <d1>x<d2>... <values>`` in row-major order.  Batch-norm
    statistics use names ``bn<m>.mean`` / ``bn<m>.var``.  Floats are written
    with ``repr`` so loading restores them exactly.
    """
    cfg = asdict(bundle.cfg)
    cfg["input_dims"] = ",".join(str(d) for d in bundle.cfg.input_dims)
    lines = [CKPT_MAGIC, "config " + " ".join(f"{k}={v}" for k, v in cfg.items())]

    def rec(name, arr):
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} " + " ".join(repr(float(v)) for v in arr.ravel()))

    for name, t in bundle.params.items():
        rec(name, t.data)
    for m, st in enumerate(bundle.bn):
        rec(f"bn{m}.mean", st.running_mean)
        rec(f"bn{m}.var", st.running_var)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelBundle:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (header {magic!r})")
        cfg_line = fh.readline().split()[1:]
        raw = dict(kv.split("=", 1) for kv in cfg_line)
        kwargs = {}
        for f in fields(NetConfig):
            v = raw[f.name]
            if f.name == "input_dims":
                kwargs[f.name] = tuple(int(x) for x in v.split(","))
            elif f.type in ("bool", bool):
                kwargs[f.name] = v == "True"
            elif f.type in ("int", int):
                kwargs[f.name] = int(v)
            else:
                kwargs[f.name] = float(v)
        bundle = ModelBundle(NetConfig(**kwargs))
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            name, shape = parts[0], tuple(int(s) for s in parts[1].split("x"))
            arr = np.array(parts[2:], dtype=np.float64).reshape(shape)
            if name.startswith("bn"):
                m, which = name[2:].split(".")
                st = bundle.bn[int(m)]
                if which == "mean":
                    st.running_mean = arr
                else:
                    st.running_var = arr
            else:
                if bundle.params[name].shape != arr.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} "
                                         f"!= model shape {bundle.params[name].shape}")
                bundle.params[name].data[...] = arr
    return bundle
