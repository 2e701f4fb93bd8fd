import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaforge.tasks import (
    DataSplit,
    KShots,
    LabelFree,
    LoadData,
    NWays,
    TaskDataset,
    TaskError,
    bayes_accuracy,
    diversity_score,
    label_free,
    load_binary,
    load_csv,
    make_blobs,
    meta_dataset_wrap,
    sampler_select,
    save_binary,
    save_csv,
    split_counts,
    synth_tasks,
    task_dataset_new,
)


def small_dataset(classes=6, per_class=12, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for c in range(classes):
        for _ in range(per_class):
            items.append((rng.normal(size=dim) + 5 * c, c))
    return meta_dataset_wrap(items)


def standard_transforms(n=3, k=2, split=None, lf=False):
    ts = [NWays(n), KShots(k), LoadData()]
    if split:
        ts.append(DataSplit(*split))
    if lf:
        ts.append(LabelFree())
    return ts


# -- wrapping -----------------------------------------------------------------

def test_wrap_counts_classes():
    idx = meta_dataset_wrap([(np.zeros(2), l) for l in [0, 0, 1, 1, 2, 2]])
    assert len(idx.by_class) == 3
    assert all(len(v) == 2 for v in idx.by_class.values())


def test_wrap_single_item():
    idx = meta_dataset_wrap([(np.ones(2), 7)])
    assert idx.by_class == {7: [0]}


def test_wrap_empty_errors():
    with pytest.raises(TaskError):
        meta_dataset_wrap([])


def test_by_class_partitions_items():
    idx = small_dataset()
    all_indices = sorted(i for v in idx.by_class.values() for i in v)
    assert all_indices == list(range(len(idx.items)))


# -- construction -------------------------------------------------------------

def test_listing_style_length():
    ts = task_dataset_new(small_dataset(classes=8, per_class=20),
                          standard_transforms(n=5, k=1, split=(7, 3)),
                          num_tasks=20000)
    assert len(ts) == 20000


def test_negative_one_means_length_one():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=-1)
    assert len(ts) == 1


@pytest.mark.parametrize("bad", [0, -2, -10])
def test_invalid_num_tasks(bad):
    with pytest.raises(TaskError):
        task_dataset_new(small_dataset(), standard_transforms(), num_tasks=bad)


def test_transform_order_enforced():
    with pytest.raises(TaskError):
        task_dataset_new(small_dataset(), [KShots(1), NWays(2), LoadData()], 5)
    with pytest.raises(TaskError):
        task_dataset_new(small_dataset(), [NWays(2), KShots(1)], 5)


def test_transform_parameter_invariants():
    with pytest.raises(TaskError):
        NWays(1)
    with pytest.raises(TaskError):
        KShots(0)
    with pytest.raises(TaskError):
        DataSplit(0, 3)


def test_too_many_ways_errors_at_first_sample():
    ts = task_dataset_new(small_dataset(classes=3), standard_transforms(n=5), 10)
    with pytest.raises(TaskError):
        ts[0]


# -- indexing and caching -----------------------------------------------------

def test_index_caches_and_replays_identically():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=50, seed=3)
    a = ts[5]
    b = ts[5]
    assert a.signature == b.signature
    assert a.support_x.data.tobytes() == b.support_x.data.tobytes()
    assert a.query_x.data.tobytes() == b.query_x.data.tobytes()
    assert len(ts.cache) == 1


def test_five_way_one_shot_support_counts():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=5, k=1), 10, seed=1)
    ep = ts[0]
    assert ep.support_x.data.shape[0] == 5
    assert sorted(ep.support_labels.tolist()) == [0, 1, 2, 3, 4]


def test_datasplit_7_3_gives_7_support_3_query_per_class():
    assert split_counts(1, DataSplit(7, 3)) == (7, 3)
    ts = task_dataset_new(small_dataset(per_class=15),
                          standard_transforms(n=3, k=1, split=(7, 3)), 10, seed=2)
    ep = ts[0]
    assert ep.support_x.data.shape[0] == 3 * 7
    assert ep.query_x.data.shape[0] == 3 * 3
    for c in range(3):
        assert (ep.support_labels == c).sum() == 7
        assert (ep.query_labels == c).sum() == 3


def test_datasplit_gcd_normalization():
    assert split_counts(1, DataSplit(14, 6)) == (7, 3)
    assert split_counts(2, DataSplit(7, 3)) == (14, 6)
    assert split_counts(3, DataSplit(5, 0)) == (3, 0)


def test_default_split_is_k_support_k_query():
    assert split_counts(4, None) == (4, 4)


def test_index_out_of_range():
    ts = task_dataset_new(small_dataset(), standard_transforms(), 5)
    with pytest.raises(TaskError):
        ts[5]


def test_support_query_disjoint_and_labels_bijective():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=4, k=2), 200, seed=4)
    for i in range(50):
        desc = ts.description(i)
        for sup, qry in zip(desc.support, desc.query):
            assert not set(sup) & set(qry)
        ep = ts[i]
        assert sorted(set(ep.support_labels)) == list(range(4))
        assert set(ep.query_labels) <= set(ep.support_labels)
        # original class ids recoverable
        assert len(desc.class_ids) == 4


def test_sample_fresh_mode_never_caches():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=-1, seed=5)
    sigs = {ts.sample().signature for _ in range(10)}
    assert len(ts.cache) == 0
    assert len(sigs) > 1  # collision over 10 draws is ~impossible in this space


def test_sample_single_task_dataset_constant():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=1, seed=6)
    sigs = {ts.sample().signature for _ in range(5)}
    assert len(sigs) == 1


def test_seeded_streams_identical():
    mk = lambda: task_dataset_new(small_dataset(), standard_transforms(), -1, seed=7)
    a, b = mk(), mk()
    for _ in range(5):
        assert a.sample().signature == b.sample().signature


def test_indexing_is_order_independent():
    mk = lambda: task_dataset_new(small_dataset(), standard_transforms(), 20, seed=8)
    a, b = mk(), mk()
    sig_a = [a[i].signature for i in range(10)]
    sig_b = [b[i].signature for i in reversed(range(10))]
    assert sig_a == list(reversed(sig_b))


# -- samplers -----------------------------------------------------------------

def test_uniform_sampler_frequencies_within_3_sigma():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=4, seed=9)
    counts = np.zeros(4)
    draws = 10000
    for _ in range(draws):
        counts[ts.sampler.choose(ts)] += 1
    sigma = np.sqrt(draws * 0.25 * 0.75)
    assert np.abs(counts - draws * 0.25).max() <= 3 * sigma


def test_high_diversity_prefers_separated_classes():
    # two well-separated and two overlapping class pairs; num_tasks=2 so each
    # description covers one pair; brute-force scores identify the winner
    rng = np.random.default_rng(10)
    items = []
    for c, center in enumerate([0.0, 40.0, 100.0, 100.5]):
        for _ in range(6):
            items.append((rng.normal(size=2) * 0.1 + center, c))
    source = meta_dataset_wrap(items)
    ts = task_dataset_new(source, standard_transforms(n=2, k=2), num_tasks=40, seed=11)
    scores = [diversity_score(ts.description(i), source) for i in range(len(ts))]
    best_quartile = set(np.argsort(scores)[::-1][:10].tolist())

    ts.set_sampler(sampler_select("high_diversity"))
    picks = {ts.sampler.choose(ts) for _ in range(200)}
    assert picks <= best_quartile


def test_low_diversity_prefers_overlapping_classes():
    source = small_dataset()
    ts = task_dataset_new(source, standard_transforms(n=2, k=1), num_tasks=16, seed=12)
    scores = [diversity_score(ts.description(i), source) for i in range(len(ts))]
    worst_quartile = set(np.argsort(scores)[:4].tolist())
    ts.set_sampler(sampler_select("low_diversity"))
    picks = {ts.sampler.choose(ts) for _ in range(100)}
    assert picks <= worst_quartile


def test_adaptive_sampler_softmax_oracle():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=2, seed=13)
    sampler = sampler_select("adaptive")
    ts.set_sampler(sampler)
    ts.feedback(ts.description(0).signature, 1.0)
    ts.feedback(ts.description(1).signature, 0.0)
    draws = 20000
    hits = sum(ts.sampler.choose(ts) == 0 for _ in range(draws))
    expect = np.e / (np.e + 1.0)
    sigma = np.sqrt(draws * expect * (1 - expect))
    assert abs(hits - draws * expect) <= 4 * sigma


def test_adaptive_before_feedback_is_uniform():
    ts = task_dataset_new(small_dataset(), standard_transforms(), num_tasks=4, seed=14)
    ts.set_sampler(sampler_select("adaptive"))
    counts = np.zeros(4)
    for _ in range(8000):
        counts[ts.sampler.choose(ts)] += 1
    sigma = np.sqrt(8000 * 0.25 * 0.75)
    assert np.abs(counts - 2000).max() <= 4 * sigma


def test_sampler_determinism_per_strategy():
    for strategy in ("uniform", "low_diversity", "high_diversity", "adaptive"):
        def run():
            ts = task_dataset_new(small_dataset(), standard_transforms(), 12, seed=15)
            ts.set_sampler(sampler_select(strategy))
            return [ts.sampler.choose(ts) for _ in range(20)]
        assert run() == run()


def test_nonuniform_sampler_rejected_for_fresh_mode():
    ts = task_dataset_new(small_dataset(), standard_transforms(), -1, seed=16)
    with pytest.raises(TaskError):
        ts.set_sampler(sampler_select("adaptive"))


# -- diversity score ----------------------------------------------------------

def test_diversity_zero_for_identical_centroids():
    items = [(np.array([1.0, 1.0]), 0)] * 3 + [(np.array([1.0, 1.0]), 1)] * 3
    source = meta_dataset_wrap(items)
    ts = task_dataset_new(source, standard_transforms(n=2, k=1), 4, seed=17)
    assert diversity_score(ts.description(0), source) == 0.0


def test_diversity_two_classes_equals_distance():
    items = [(np.array([0.0, 0.0]), 0)] * 4 + [(np.array([3.0, 4.0]), 1)] * 4
    source = meta_dataset_wrap(items)
    ts = task_dataset_new(source, standard_transforms(n=2, k=2), 4, seed=18)
    assert diversity_score(ts.description(0), source) == pytest.approx(5.0)


def test_diversity_unit_triangle():
    pts = [np.array([0.0, 0.0]), np.array([1.0, 0.0]),
           np.array([0.5, np.sqrt(3) / 2])]
    items = [(p, c) for c, p in enumerate(pts) for _ in range(3)]
    source = meta_dataset_wrap(items)
    ts = task_dataset_new(source, standard_transforms(n=3, k=1), 4, seed=19)
    assert diversity_score(ts.description(0), source) == pytest.approx(1.0)


def test_diversity_single_class_errors():
    source = small_dataset()
    ts = task_dataset_new(source, standard_transforms(n=2, k=1), 4, seed=20)
    from dataclasses import replace
    desc = ts.description(0)
    broken = replace(desc, class_ids=(desc.class_ids[0],))
    with pytest.raises(TaskError):
        diversity_score(broken, source)


def test_diversity_invariant_translation_and_relabel():
    rng = np.random.default_rng(21)
    base = [(rng.normal(size=3) + 4 * c, c) for c in range(3) for _ in range(4)]
    shifted = [(x + np.array([10.0, -5.0, 2.0]), y) for x, y in base]
    relabeled = [(x, {0: 2, 1: 0, 2: 1}[y]) for x, y in base]
    scores = []
    for items in (base, shifted, relabeled):
        source = meta_dataset_wrap(items)
        ts = task_dataset_new(source, standard_transforms(n=3, k=2), 4, seed=22)
        scores.append(diversity_score(ts.description(0), source))
    assert scores[0] == pytest.approx(scores[1], abs=1e-9)
    assert scores[0] == pytest.approx(scores[2], abs=1e-9)


# -- synthetic sources --------------------------------------------------------

def test_sinusoid_identity():
    fam = synth_tasks("sinusoid", {"amplitude": (1.0, 1.0), "phase": (0.0, 0.0)})
    ep = fam.sample(5, 5, np.random.default_rng(23))
    assert np.allclose(np.sin(ep.support_x.data), ep.support_y.data)


def test_sinusoid_bad_range():
    with pytest.raises(TaskError):
        synth_tasks("sinusoid", {"amplitude": (2.0, -1.0)})


def test_blobs_zero_noise_nearest_centroid_perfect():
    items, centroids = make_blobs(4, 10, 3, centroid_spread=5.0, noise=0.0, seed=24)
    xs = np.stack([x for x, _ in items])
    ys = np.asarray([y for _, y in items])
    d2 = ((xs[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assert (d2.argmin(axis=1) == ys).all()
    assert bayes_accuracy(centroids, 0.0) == 1.0


def test_blobs_bayes_rate_oracle():
    _, centroids = make_blobs(5, 10, 4, centroid_spread=10.0, noise=1.0, seed=25)
    assert bayes_accuracy(centroids, 1.0, seed=25) >= 0.99


def test_blobs_deterministic_under_seed():
    a, _ = make_blobs(3, 5, 2, 4.0, 0.5, seed=26)
    b, _ = make_blobs(3, 5, 2, 4.0, 0.5, seed=26)
    assert all(np.array_equal(x1, x2) and y1 == y2
               for (x1, y1), (x2, y2) in zip(a, b))


def test_series_prediction_family():
    fam = synth_tasks("series")
    ep = fam.sample(6, 3, np.random.default_rng(27))
    assert ep.support_x.data.shape == (6, 4)
    assert ep.query_y.data.shape == (3, 1)


# -- label-free ---------------------------------------------------------------

def test_label_free_five_way_one_shot():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=5, k=1), 10, seed=28)
    ep = label_free(ts[0])
    assert ep.n_way == 5
    assert sorted(ep.support_labels.tolist()) == [0, 1, 2, 3, 4]


def test_label_free_idempotent_signature():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=3, k=2), 10, seed=29)
    once = label_free(ts[0])
    twice = label_free(once)
    assert once.signature == twice.signature
    assert once is twice


def test_label_free_pseudo_labels_bijective():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=4, k=2), 10, seed=30)
    ep = label_free(ts[0])
    n = ep.support_labels.size
    assert sorted(ep.support_labels.tolist()) == list(range(n))
    assert set(ep.query_labels) <= set(range(n))


def test_label_free_transform_in_pipeline():
    ts = task_dataset_new(small_dataset(), standard_transforms(n=3, k=1, lf=True),
                          10, seed=31)
    assert ts[0].label_free


# -- file formats -------------------------------------------------------------

def test_csv_roundtrip(tmp_path):
    items = [(np.array([0.5, -1.25, 3.0]), 2), (np.array([1.0, 2.0, -0.125]), 0)]
    path = tmp_path / "data.csv"
    save_csv(path, items)
    header = path.read_text().splitlines()[0]
    assert header == "label,f0,f1,f2"
    loaded = load_csv(path)
    for (x1, y1), (x2, y2) in zip(items, loaded):
        assert np.array_equal(x1, x2) and y1 == y2


def test_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(32)
    items = [(rng.normal(size=5), int(i % 3)) for i in range(7)]
    path = tmp_path / "data.mft"
    save_binary(path, items)
    assert path.read_bytes()[:4] == b"MFT1"
    loaded = load_binary(path)
    for (x1, y1), (x2, y2) in zip(items, loaded):
        assert x1.tobytes() == x2.tobytes() and y1 == y2


def test_binary_bad_magic(tmp_path):
    path = tmp_path / "bad.mft"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(TaskError):
        load_binary(path)


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("foo,f0\n1,2\n")
    with pytest.raises(TaskError):
        load_csv(path)


# -- properties ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 5), k=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_episode_invariants_property(n, k, seed):
    ts = task_dataset_new(small_dataset(classes=6, per_class=10),
                          standard_transforms(n=n, k=k), 50, seed=seed)
    ep = ts[seed % 50]
    assert ep.support_x.data.shape[0] == n * k
    counts = np.bincount(ep.support_labels, minlength=n)
    assert (counts == k).all()
    assert set(ep.query_labels) <= set(range(n))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_cache_stays_empty_in_fresh_mode_property(seed):
    ts = task_dataset_new(small_dataset(), standard_transforms(), -1, seed=seed)
    for _ in range(3):
        ts.sample()
    assert len(ts.cache) == 0
