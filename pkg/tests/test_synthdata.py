import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmsada import synthdata as sd


def small_specs(**kw):
    return [sd.SyntheticDomainSpec(f"D{i + 1}", seed=101 + i, train_segments=80, test_segments=30, **kw)
            for i in range(3)]


@pytest.fixture(scope="module")
def small():
    return sd.generate_domains(small_specs())


def ridge_probe(train_x, train_y, K, lam=1.0):
    X = np.column_stack([train_x, np.ones(len(train_x))])
    Y = np.eye(K)[train_y]
    W = np.linalg.solve(X.T @ X + lam * np.eye(X.shape[1]), X.T @ Y)
    return lambda x: np.argmax(np.column_stack([x, np.ones(len(x))]) @ W, axis=1)


def probe_features(ss, m, W=16):
    xs, _ = sd.eval_windows(ss, W, 1)
    return xs[m]


# ---------------------------------------------------------------- generation

def test_generation_is_deterministic():
    a = sd.generate_domains(small_specs())
    b = sd.generate_domains(small_specs())
    for k in a:
        for m in range(2):
            assert np.array_equal(a[k].train.seqs[m], b[k].train.seqs[m])
        assert np.array_equal(a[k].test._labels, b[k].test._labels)


def test_class_frequencies_follow_prior():
    spec = sd.SyntheticDomainSpec("D1", seed=7, train_segments=10_000, test_segments=10,
                                  min_len=20, max_len=20)
    other = sd.SyntheticDomainSpec("D2", seed=8, train_segments=10, test_segments=10)
    ds = sd.generate_domains([spec, other])["D1"]
    freq = np.bincount(ds.train.all_labels(), minlength=8) / 10_000
    assert np.max(np.abs(freq - spec.class_prior)) < 0.02


def test_inconsistent_class_counts():
    specs = [sd.SyntheticDomainSpec("A", 1, class_count=8), sd.SyntheticDomainSpec("B", 2, class_count=5)]
    with pytest.raises(sd.ConfigError):
        sd.generate_domains(specs)


def test_explicit_prior_must_be_distribution():
    with pytest.raises(sd.ConfigError):
        sd.SyntheticDomainSpec("A", 1, class_count=2, class_prior=[0.7, 0.7])


def test_priors_share_imbalance_but_differ(small):
    priors = np.array([small[k].spec.class_prior for k in small])
    assert not np.allclose(priors[0], priors[1])
    # the shared base makes the priors closer to each other than independent draws would be
    assert np.corrcoef(priors)[np.triu_indices(3, 1)].mean() > 0


def test_shift_free_domains_transfer():
    specs = [sd.SyntheticDomainSpec(f"D{i}", seed=200 + i, appearance_strength=0.0,
                                    appearance_bias=0.0, motion_noise_scale=0.0,
                                    class_prior=np.full(8, 1 / 8), train_segments=400,
                                    test_segments=400) for i in (1, 2)]
    ds = sd.generate_domains(specs)
    for m in range(2):
        probe = ridge_probe(probe_features(ds["D1"].train, m), ds["D1"].train.all_labels(), 8)
        in_dom = np.mean(probe(probe_features(ds["D1"].test, m)) == ds["D1"].test.all_labels())
        cross = np.mean(probe(probe_features(ds["D2"].test, m)) == ds["D2"].test.all_labels())
        assert abs(in_dom - cross) < 0.06


def test_motion_stream_is_the_robust_modality():
    # robust means a smaller accuracy drop when moving to another domain
    ds = sd.generate_domains(sd.default_domain_specs())
    for src, tgt in [("D1", "D2"), ("D2", "D3"), ("D3", "D1")]:
        drops = []
        for m in range(2):
            probe = ridge_probe(probe_features(ds[src].train, m), ds[src].train.all_labels(), 8)
            hit = lambda ss: np.mean(probe(probe_features(ss, m)) == ss.all_labels())
            drops.append(hit(ds[src].test) - hit(ds[tgt].test))
        assert drops[1] < drops[0]


# ---------------------------------------------------------------- windows

def test_equidistant_starts_closed_form():
    np.testing.assert_array_equal(sd.equidistant_starts(80, 16, 5), [0, 16, 32, 48, 64])


def test_equidistant_starts_degenerate_length():
    np.testing.assert_array_equal(sd.equidistant_starts(16, 16, 5), [0] * 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(16, 400), st.integers(2, 9))
def test_equidistant_starts_property(T, n):
    s = sd.equidistant_starts(T, 16, n)
    assert s[0] == 0 and s[-1] == T - 16
    assert np.all(np.diff(s) >= 0)
    expect = [int(np.floor(i * (T - 16) / (n - 1) + 0.5)) for i in range(n)]
    assert s.tolist() == expect


def test_sample_window_modes(small):
    seg = small["D1"].train.segment(0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        (w,) = sd.sample_window(seg, "train", 16, rng=rng)
        assert 0 <= w.starts[0] <= seg.length - 16
        assert w.windows[0].shape == (16, 12)
    test = sd.sample_window(seg, "test", 16)
    assert [w.starts[0] for w in test] == sd.equidistant_starts(seg.length, 16).tolist()


def test_short_segment_rejected(small):
    seg = small["D1"].train.segment(0)
    with pytest.raises(sd.SegmentTooShortError):
        sd.sample_window(seg, "test", seg.length + 1)


# ---------------------------------------------------------------- pairs

def test_sync_positive_shares_position(small):
    w, c = sd.make_pair(small["D1"].train, sd.SYNC, 1, 16, np.random.default_rng(0))
    assert c == 1 and w.segment_ids[0] == w.segment_ids[1] and w.starts[0] == w.starts[1]


def test_seg_corr_positive_shares_segment(small):
    rng = np.random.default_rng(1)
    differs = False
    for _ in range(20):
        w, _ = sd.make_pair(small["D1"].train, sd.SEG_CORR, 1, 16, rng)
        assert w.segment_ids[0] == w.segment_ids[1]
        differs |= w.starts[0] != w.starts[1]
    assert differs


def test_negative_pairs_differ_in_class(small):
    ss = small["D1"].train
    rng = np.random.default_rng(2)
    for _ in range(50):
        w, c = sd.make_pair(ss, sd.SEG_CORR, 0, 16, rng)
        i, j = (int(np.flatnonzero(ss.ids == s)[0]) for s in w.segment_ids)
        assert c == 0 and ss.label(i) != ss.label(j)


def test_negatives_need_two_classes():
    ss = sd.SegmentSet("X", "train", [np.zeros((3, 20, 2))] * 2, [20] * 3, [1, 1, 1])
    with pytest.raises(sd.DataError):
        sd.make_pair(ss, sd.SYNC, 0, 16, np.random.default_rng(0))


# ---------------------------------------------------------------- batches

def check_batch(batch, B):
    q = B // 4
    assert len(batch) == B
    assert batch.composition == {"n_source": B // 2, "n_target": B // 2,
                                 "n_corresponding": B // 2, "n_noncorresponding": B // 2}
    for dom in (sd.SOURCE, sd.TARGET):
        half = batch.d == dom
        assert (batch.c[half] == 1).sum() == q and (batch.c[half] == 0).sum() == q
    assert np.array_equal(batch.eligible, np.flatnonzero((batch.d == 1) & (batch.c == 1)))
    assert len(batch.eligible) == q
    assert np.all(batch.y[batch.eligible] >= 0)
    assert np.all(batch.y[np.setdiff1d(np.arange(B), batch.eligible)] == -1)
    for x in batch.x:
        assert x.shape[0] == B
    negs = batch.c == 0
    assert np.all(batch.segment_ids[0][negs] != batch.segment_ids[1][negs])
    assert np.all(batch.segment_ids[0][~negs] == batch.segment_ids[1][~negs])


@pytest.mark.parametrize("B,eligible", [(128, 32), (8, 2)])
def test_compose_batch_counts(small, B, eligible):
    batch = sd.compose_batch(small["D1"].train, small["D2"].train, B, sd.SEG_CORR, 16,
                             np.random.default_rng(0))
    check_batch(batch, B)
    assert len(batch.eligible) == eligible


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([8, 64, 128]), st.sampled_from(sd.POLICIES), st.integers(0, 10**6))
def test_compose_batch_invariants(B, policy, seed):
    ds = _shared_small()
    before = ds["D2"].train.label_reads
    batch = sd.compose_batch(ds["D1"].train, ds["D2"].train, B, policy, 16, np.random.default_rng(seed))
    check_batch(batch, B)
    assert ds["D2"].train.label_reads == before
    if policy == sd.SYNC:
        pos = batch.c == 1
        assert np.array_equal(batch.starts[0][pos], batch.starts[1][pos])


_CACHE = {}


def _shared_small():
    if "ds" not in _CACHE:
        _CACHE["ds"] = sd.generate_domains(small_specs())
    return _CACHE["ds"]


@pytest.mark.parametrize("B", [0, 6, 130])
def test_compose_batch_rejects_bad_size(small, B):
    with pytest.raises(sd.ConfigError):
        sd.compose_batch(small["D1"].train, small["D2"].train, B, sd.SYNC, 16, np.random.default_rng(0))


def test_target_negatives_only_differ_in_segment(small):
    batch = sd.compose_batch(small["D1"].train, small["D2"].train, 64, sd.SYNC, 16, np.random.default_rng(3))
    tneg = (batch.d == sd.TARGET) & (batch.c == 0)
    assert np.all(batch.segment_ids[0][tneg] != batch.segment_ids[1][tneg])


def test_select_recounts(small):
    batch = sd.compose_batch(small["D1"].train, small["D2"].train, 16, sd.SYNC, 16, np.random.default_rng(0))
    sub = batch.select(batch.source_rows)
    assert sub.composition == {"n_source": 8, "n_target": 0, "n_corresponding": 4, "n_noncorresponding": 4}


# ---------------------------------------------------------------- files

def test_dump_load_round_trip(small, tmp_path):
    path = tmp_path / "d1.txt"
    sd.dump_domain(small["D1"], path)
    back = sd.load_domain(path)
    assert back.domain_id == "D1" and back.class_count == 8
    for a, b in ((small["D1"].train, back.train), (small["D1"].test, back.test)):
        assert np.array_equal(a.lengths, b.lengths)
        assert np.array_equal(a._labels, b._labels)
        for m in range(2):
            for i in range(len(a)):
                T = a.lengths[i]
                assert np.array_equal(a.seqs[m][i, :T], b.seqs[m][i, :T])


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(sd.DataError):
        sd.load_domain(p)


def test_spawned_streams_are_reproducible():
    a = [r.random() for r in sd.spawn_rngs(5, 3)]
    b = [r.random() for r in sd.spawn_rngs(5, 3)]
    assert a == b and len(set(a)) == 3
