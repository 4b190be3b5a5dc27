"""Synthetic two-modality action segments with a controllable domain shift.

Each class owns a latent motion prototype (a bundle of sinusoids) and a
static appearance vector, both drawn once from a seed shared by every
domain.  A segment replays its class prototype with random speed, phase and
amplitude jitter.

* modality 1 ("rgb-like") sees appearance plus a weak view of the latent
  state, then passes through a per-domain orthogonal transform and bias.
  This is where the domain shift lives.
* modality 2 ("flow-like") sees frame-to-frame latent differences with
  heavier observation noise and only a small per-domain perturbation.

Seed streams: every domain draws from ``SeedSequence(spec.seed)``; the
shared prototypes from ``SeedSequence(prototype_seed)``.  Batch sampling and
window sampling take an explicit ``np.random.Generator`` so concurrent
callers never share state; use :func:`spawn_rngs` to split a run seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.linalg import expm

from . import kernels
from ._io import atomic_write_text

SOURCE = 1
TARGET = 0
SYNC = "sync"
SEG_CORR = "seg_corr"
POLICIES = (SYNC, SEG_CORR)

# full-size segment counts per domain, for scaling experiments up
FULL_SCALE_TRAIN_SEGMENTS = {"D1": 1543, "D2": 2495, "D3": 3897}
FULL_SCALE_TEST_SEGMENTS = {"D1": 435, "D2": 750, "D3": 974}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class SegmentTooShortError(DataError):
    pass


@dataclass
class GeneratorParams:
    """Knobs shared by every domain of one benchmark."""

    class_count: int = 8
    input_dim: int = 12
    latent_dim: int = 6
    appearance_dims: int = 6
    appearance_scale: float = 1.0
    appearance_jitter: float = 1.0
    rgb_motion_gain: float = 0.5
    rgb_noise: float = 1.5
    flow_gain: float = 3.0
    flow_noise: float = 1.8
    min_len: int = 40
    max_len: int = 120
    # class priors: a shared imbalance ~ Dirichlet(base_concentration), then per
    # domain ~ Dirichlet(domain_concentration * K * shared)
    prior_base_concentration: float = 1.0
    prior_domain_concentration: float = 2.0


@dataclass
class SyntheticDomainSpec:
    domain_id: str
    seed: int
    class_count: int = 8
    class_prior: np.ndarray | None = None
    appearance_strength: float = 0.3
    appearance_bias: float = 0.5
    motion_noise_scale: float = 0.05
    train_segments: int = 600
    test_segments: int = 150
    min_len: int = 40
    max_len: int = 120

    def __post_init__(self):
        if self.train_segments <= 0 or self.test_segments <= 0 or self.class_count <= 0:
            raise ConfigError(f"domain {self.domain_id}: all counts must be positive")
        if self.min_len <= 0 or self.max_len < self.min_len:
            raise ConfigError(f"domain {self.domain_id}: bad segment length range")
        if self.class_prior is not None:
            self.check_prior()

    def check_prior(self) -> None:
        self.class_prior = np.asarray(self.class_prior, dtype=np.float64)
        if self.class_prior.shape != (self.class_count,):
            raise ConfigError(f"domain {self.domain_id}: class_prior needs {self.class_count} entries")
        if np.any(self.class_prior < 0) or abs(self.class_prior.sum() - 1.0) > 1e-9:
            raise ConfigError(f"domain {self.domain_id}: class_prior must be a distribution")

    def appearance_transform(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        """Orthogonal matrix and bias applied to modality 1 of this domain."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 11]))
        A = rng.normal(size=(dim, dim))
        skew = (A - A.T) / 2.0
        skew /= np.linalg.norm(skew, 2)
        Q = expm(self.appearance_strength * np.pi * skew)
        # re-orthogonalise to wash out expm rounding
        u, _, vt = np.linalg.svd(Q)
        Q = u @ vt
        b = self.appearance_bias * rng.normal(size=dim)
        return Q, b

    def motion_perturbation(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 13]))
        s = self.motion_noise_scale
        M = np.eye(dim) + s * rng.normal(size=(dim, dim)) / np.sqrt(dim)
        return M, s * rng.normal(size=dim)


@dataclass
class ActionSegment:
    id: int
    y: int
    domain_id: str
    modalities: list[np.ndarray]

    @property
    def length(self) -> int:
        return self.modalities[0].shape[0]


@dataclass
class WindowSample:
    windows: list[np.ndarray]
    segment_ids: tuple[int, ...] = ()
    starts: tuple[int, ...] = ()

    @property
    def window_len(self) -> int:
        return self.windows[0].shape[0]


class SegmentSet:
    """Padded storage for one split of one domain.

    Class labels are only reachable through :meth:`labels_at` / :meth:`label`,
    which count every read in ``label_reads``.
    """

    def __init__(self, domain_id: str, split: str, seqs: list[np.ndarray],
                 lengths: np.ndarray, labels: np.ndarray, ids: np.ndarray | None = None):
        self.domain_id = domain_id
        self.split = split
        self.seqs = seqs
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.ids = np.arange(len(self.lengths)) if ids is None else np.asarray(ids)
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def n_modalities(self) -> int:
        return len(self.seqs)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.shape[2] for s in self.seqs)

    def labels_at(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        self.label_reads += int(idx.size)
        return self._labels[idx]

    def label(self, i: int) -> int:
        self.label_reads += 1
        return int(self._labels[i])

    def all_labels(self) -> np.ndarray:
        return self.labels_at(np.arange(len(self)))

    def segment(self, i: int) -> ActionSegment:
        T = int(self.lengths[i])
        return ActionSegment(int(self.ids[i]), self.label(i), self.domain_id,
                             [s[i, :T].copy() for s in self.seqs])

    def subset(self, idx) -> "SegmentSet":
        idx = np.asarray(idx)
        return SegmentSet(self.domain_id, self.split, [s[idx] for s in self.seqs],
                          self.lengths[idx], self._labels[idx], self.ids[idx])


@dataclass
class DomainDataset:
    domain_id: str
    class_count: int
    train: SegmentSet
    test: SegmentSet
    spec: SyntheticDomainSpec | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.train.dims


# ---------------------------------------------------------------- generation

@dataclass
class _Prototypes:
    freqs: np.ndarray       # K x L
    phases: np.ndarray      # K x L
    amps: np.ndarray        # K x L
    appearance: np.ndarray  # K x A
    rgb_mix: np.ndarray     # L x (D - A)
    flow_mix: np.ndarray    # L x D


def _draw_prototypes(params: GeneratorParams, seed: int) -> _Prototypes:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    K, L, D, A = params.class_count, params.latent_dim, params.input_dim, params.appearance_dims
    if not 0 < A < D:
        raise ConfigError("appearance_dims must lie strictly between 0 and input_dim")
    return _Prototypes(
        freqs=rng.uniform(0.03, 0.15, size=(K, L)),
        phases=rng.uniform(0, 2 * np.pi, size=(K, L)),
        amps=rng.uniform(0.5, 1.5, size=(K, L)),
        appearance=params.appearance_scale * rng.normal(size=(K, A)),
        rgb_mix=rng.normal(size=(L, D - A)) / np.sqrt(L),
        flow_mix=rng.normal(size=(L, D)) / np.sqrt(L),
    )


def _render_split(spec: SyntheticDomainSpec, params: GeneratorParams, protos: _Prototypes,
                  n: int, rng: np.random.Generator, split: str) -> SegmentSet:
    D, A = params.input_dim, params.appearance_dims
    Q, b = spec.appearance_transform(D)
    M, mb = spec.motion_perturbation(D)
    labels = rng.choice(spec.class_count, size=n, p=spec.class_prior)
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
    Tmax = int(spec.max_len)
    x1 = np.zeros((n, Tmax, D))
    x2 = np.zeros((n, Tmax, D))
    t = np.arange(Tmax + 1, dtype=np.float64)
    for i in range(n):
        k, T = labels[i], lengths[i]
        speed = rng.uniform(0.8, 1.25)
        phase = rng.uniform(0, 2 * np.pi)
        gain = rng.normal(1.0, 0.1)
        arg = 2 * np.pi * protos.freqs[k][None, :] * speed * t[: T + 1, None] + protos.phases[k] + phase
        z = gain * protos.amps[k] * np.sin(arg)                      # (T+1) x L
        look = protos.appearance[k] + params.appearance_jitter * rng.normal(size=A)
        rgb = np.empty((T, D))
        rgb[:, :A] = look
        rgb[:, A:] = params.rgb_motion_gain * (z[:T] @ protos.rgb_mix)
        rgb += params.rgb_noise * rng.normal(size=(T, D))
        x1[i, :T] = rgb @ Q.T + b
        flow = params.flow_gain * (np.diff(z, axis=0) @ protos.flow_mix)
        flow += params.flow_noise * rng.normal(size=(T, D))
        x2[i, :T] = flow @ M.T + mb
    return SegmentSet(spec.domain_id, split, [x1, x2], lengths, labels)


def generate_domains(specs: Iterable[SyntheticDomainSpec], prototype_seed: int = 0,
                     params: GeneratorParams | None = None) -> dict[str, DomainDataset]:
    """Render every domain from shared class prototypes; deterministic in the seeds."""
    specs = list(specs)
    params = params or GeneratorParams()
    if len(specs) < 2:
        raise ConfigError("need at least two domain specs")
    Ks = {s.class_count for s in specs} | {params.class_count}
    if len(Ks) != 1:
        raise ConfigError(f"inconsistent class counts across domain specs: {sorted(Ks)}")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate domain ids: {ids}")
    protos = _draw_prototypes(params, prototype_seed)
    shared_prior = shared_class_prior(params, prototype_seed)
    out = {}
    for spec in specs:
        if spec.class_prior is None:
            spec.class_prior = domain_class_prior(spec, params, shared_prior)
            spec.check_prior()
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
        train = _render_split(spec, params, protos, spec.train_segments, rng, "train")
        test = _render_split(spec, params, protos, spec.test_segments, rng, "test")
        out[spec.domain_id] = DomainDataset(spec.domain_id, spec.class_count, train, test, spec)
    return out


def shared_class_prior(params: GeneratorParams, prototype_seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([prototype_seed, 5]))
    return rng.dirichlet(np.full(params.class_count, params.prior_base_concentration))


def domain_class_prior(spec: SyntheticDomainSpec, params: GeneratorParams,
                       shared: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    conc = params.prior_domain_concentration * spec.class_count * shared
    p = rng.dirichlet(np.maximum(conc, 1e-3))
    return p / p.sum()


def default_domain_specs(class_count: int = 8, train_segments: int = 600,
                         test_segments: int = 150) -> list[SyntheticDomainSpec]:
    return [
        SyntheticDomainSpec(f"D{i + 1}", seed=101 + i, class_count=class_count,
                            train_segments=train_segments, test_segments=test_segments)
        for i in range(3)
    ]


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generator streams derived from one run seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------- windows

def equidistant_starts(T: int, window_len: int, n: int = 5) -> np.ndarray:
    if T < window_len:
        raise SegmentTooShortError(f"segment of length {T} shorter than window {window_len}")
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    pos = np.arange(n) * (T - window_len) / (n - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def sample_window(segment: ActionSegment, mode: str, window_len: int,
                  n_test_windows: int = 5, rng: np.random.Generator | None = None
                  ) -> list[WindowSample]:
    """One random window in train mode, ``n_test_windows`` equidistant ones in test mode."""
    T = segment.length
    if T < window_len:
        raise SegmentTooShortError(f"segment {segment.id} has length {T} < window {window_len}")
    if mode == "train":
        starts = [int(rng.integers(0, T - window_len + 1))]
    elif mode == "test":
        starts = equidistant_starts(T, window_len, n_test_windows).tolist()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_mod = len(segment.modalities)
    return [WindowSample([m[s:s + window_len] for m in segment.modalities],
                         (segment.id,) * n_mod, (s,) * n_mod) for s in starts]


def random_starts(lengths: np.ndarray, window_len: int, rng: np.random.Generator) -> np.ndarray:
    span = np.asarray(lengths) - window_len + 1
    if np.any(span < 1):
        raise SegmentTooShortError("segment shorter than the window")
    return (rng.random(len(span)) * span).astype(np.int64)


def _negative_partners(ss: SegmentSet, first: np.ndarray, rng: np.random.Generator,
                       label_aware: bool, max_tries: int = 1000) -> np.ndarray:
    """Segments paired with ``first`` for non-corresponding examples.

    Label-aware mode (source) guarantees a different class; otherwise only a
    different segment is guaranteed, so target labels are never read.
    """
    N = len(ss)
    if N < 2:
        raise DataError("need at least two segments to build negatives")
    first_y = ss.labels_at(first) if label_aware else None
    if label_aware and len(np.unique(ss._labels)) < 2:
        raise DataError("no segment with a differing class to pair against")
    second = rng.integers(0, N, size=len(first))
    for _ in range(max_tries):
        bad = second == first
        if label_aware:
            bad |= ss.labels_at(second) == first_y
        if not bad.any():
            return second
        second[bad] = rng.integers(0, N, size=int(bad.sum()))
    raise DataError("could not find differing-class partners")


def make_pair(ss: SegmentSet, policy: str, label: int, window_len: int,
              rng: np.random.Generator, label_aware: bool = True) -> tuple[WindowSample, int]:
    """Build one two-modality sample with correspondence bit ``label``."""
    batch = _pairs(ss, policy, label, 1, window_len, rng, label_aware)
    seg, starts = batch
    ws = [ss.seqs[m][seg[m][0], starts[m][0]:starts[m][0] + window_len].copy()
          for m in range(ss.n_modalities)]
    return WindowSample(ws, tuple(int(s[0]) for s in seg), tuple(int(s[0]) for s in starts)), label


def _pairs(ss: SegmentSet, policy: str, c: int, n: int, window_len: int,
           rng: np.random.Generator, label_aware: bool):
    if policy not in POLICIES:
        raise ConfigError(f"unknown correspondence policy {policy!r}")
    M = ss.n_modalities
    first = rng.integers(0, len(ss), size=n)
    if c == 1:
        segs = [first] * M
    else:
        segs = [first] + [_negative_partners(ss, first, rng, label_aware) for _ in range(M - 1)]
    s0 = random_starts(ss.lengths[segs[0]], window_len, rng)
    starts = [s0]
    for m in range(1, M):
        if c == 1 and policy == SYNC:
            starts.append(s0)
        else:
            starts.append(random_starts(ss.lengths[segs[m]], window_len, rng))
    return segs, starts


@dataclass
class TrainingBatch:
    """A composed mini-batch; rows are ordered source-corr, source-neg, target-corr, target-neg."""

    x: list[np.ndarray]
    d: np.ndarray
    c: np.ndarray
    y: np.ndarray                 # -1 where no class label is available
    segment_ids: list[np.ndarray]
    starts: list[np.ndarray]
    composition: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.d)

    @property
    def eligible(self) -> np.ndarray:
        """Rows that may train the classifier: corresponding source examples."""
        return np.flatnonzero((self.d == SOURCE) & (self.c == 1))

    @property
    def source_rows(self) -> np.ndarray:
        return np.flatnonzero(self.d == SOURCE)

    @property
    def target_rows(self) -> np.ndarray:
        return np.flatnonzero(self.d == TARGET)

    def select(self, rows) -> "TrainingBatch":
        rows = np.asarray(rows)
        d, c = self.d[rows], self.c[rows]
        comp = {
            "n_source": int((d == SOURCE).sum()),
            "n_target": int((d == TARGET).sum()),
            "n_corresponding": int((c == 1).sum()),
            "n_noncorresponding": int((c == 0).sum()),
        }
        return TrainingBatch([x[rows] for x in self.x], d, c, self.y[rows],
                             [s[rows] for s in self.segment_ids],
                             [s[rows] for s in self.starts], comp)


def compose_batch(source: SegmentSet, target: SegmentSet, B: int, policy: str,
                  window_len: int, rng: np.random.Generator) -> TrainingBatch:
    """Half source, half target; each half split evenly into corresponding and not."""
    if B <= 0 or B % 4:
        raise ConfigError(f"batch size must be a positive multiple of 4, got {B}")
    q = B // 4
    M = source.n_modalities
    xs = [[] for _ in range(M)]
    segs_all = [[] for _ in range(M)]
    starts_all = [[] for _ in range(M)]
    d, c, y = [], [], []
    for ss, dom in ((source, SOURCE), (target, TARGET)):
        for corr in (1, 0):
            segs, starts = _pairs(ss, policy, corr, q, window_len, rng, label_aware=dom == SOURCE)
            for m in range(M):
                xs[m].append(kernels.gather_windows(ss.seqs[m], segs[m], starts[m], window_len))
                segs_all[m].append(ss.ids[segs[m]])
                starts_all[m].append(starts[m])
            d.append(np.full(q, dom))
            c.append(np.full(q, corr))
            if dom == SOURCE and corr == 1:
                y.append(ss.labels_at(segs[0]))
            else:
                y.append(np.full(q, -1))
    d, c, y = np.concatenate(d), np.concatenate(c), np.concatenate(y)
    composition = {
        "n_source": int((d == SOURCE).sum()),
        "n_target": int((d == TARGET).sum()),
        "n_corresponding": int((c == 1).sum()),
        "n_noncorresponding": int((c == 0).sum()),
    }
    return TrainingBatch([np.concatenate(v) for v in xs], d, c, y,
                         [np.concatenate(v) for v in segs_all],
                         [np.concatenate(v) for v in starts_all], composition)


def eval_windows(ss: SegmentSet, window_len: int, n_windows: int = 5) -> tuple[list[np.ndarray], np.ndarray]:
    """Flattened equidistant windows for every segment; rows grouped per segment."""
    seg_idx = np.repeat(np.arange(len(ss)), n_windows)
    starts = np.concatenate([equidistant_starts(int(T), window_len, n_windows) for T in ss.lengths])
    xs = [kernels.gather_windows(s, seg_idx, starts, window_len) for s in ss.seqs]
    return xs, seg_idx


# ---------------------------------------------------------------- dump / load

DATA_MAGIC = "MMSADA-DATA 1"


def dump_domain(ds: DomainDataset, path) -> None:
    """Write one domain as a flat text file (header, then one record per segment).

    Layout::

        MMSADA-DATA 1
        domain <id> classes <K> dims <d1> <d2> ... train <n> test <n>
        <split> <id> <label> <T> <T*d1 values of m1> <T*d2 values of m2> ...

    Values are written with ``repr`` so a round trip is exact.
    """
    lines = [DATA_MAGIC,
             f"domain {ds.domain_id} classes {ds.class_count} dims "
             + " ".join(str(d) for d in ds.dims)
             + f" train {len(ds.train)} test {len(ds.test)}"]
    for ss in (ds.train, ds.test):
        for i in range(len(ss)):
            T = int(ss.lengths[i])
            vals = [repr(float(v)) for s in ss.seqs for v in s[i, :T].ravel()]
            lines.append(" ".join([ss.split, str(int(ss.ids[i])), str(int(ss._labels[i])), str(T)] + vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_domain(path) -> DomainDataset:
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != DATA_MAGIC:
            raise DataError(f"{path}: unrecognised header {magic!r}")
        head = fh.readline().split()
        kv = dict(zip(head[0::2], head[1::2]))
        dom = head[1]
        K = int(kv["classes"])
        di = head.index("dims")
        ti = head.index("train")
        dims = [int(v) for v in head[di + 1:ti]]
        counts = {"train": int(head[ti + 1]), "test": int(head[ti + 3])}
        recs = {"train": [], "test": []}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            split, sid, y, T = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
            vals = np.array(parts[4:], dtype=np.float64)
            mods, off = [], 0
            for d in dims:
                mods.append(vals[off:off + T * d].reshape(T, d))
                off += T * d
            recs[split].append((sid, y, T, mods))
    sets = {}
    for split, rows in recs.items():
        if len(rows) != counts[split]:
            raise DataError(f"{path}: expected {counts[split]} {split} segments, found {len(rows)}")
        Tmax = max(r[2] for r in rows)
        seqs = [np.zeros((len(rows), Tmax, d)) for d in dims]
        for i, (_, _, T, mods) in enumerate(rows):
            for m, arr in enumerate(mods):
                seqs[m][i, :T] = arr
        sets[split] = SegmentSet(dom, split, seqs, [r[2] for r in rows], [r[1] for r in rows],
                                 [r[0] for r in rows])
    return DomainDataset(dom, K, sets["train"], sets["test"])
