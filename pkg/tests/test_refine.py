import numpy as np
import pytest

from ssdg.errors import ConfigError, NumericError
from ssdg.refine import (
    KnnAggregate,
    RefineConfig,
    cosine_similarity,
    knn_aggregate,
    refine,
    select_clean,
)
from ssdg.threshold import PseudoLabelBatch


def _batch(labels, selected=None, example_ids=None, num_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or int(labels.max()) + 1
    q = np.eye(num_classes)[labels]
    return PseudoLabelBatch(
        distributions=q,
        pseudo_labels=labels,
        confidences=np.ones(len(labels)),
        thresholds=np.zeros(len(labels)),
        selected=np.ones(len(labels), dtype=bool) if selected is None else np.asarray(selected, dtype=bool),
        domain_ids=np.zeros(len(labels), dtype=np.int64),
        example_ids=None if example_ids is None else np.asarray(example_ids),
    )


def _knn_oracle(embeddings, labels, ids, k):
    n = len(labels)
    corrected, agreements = [], []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (-cosine_similarity(embeddings[i], embeddings[j]), ids[j]))
        nbr = others[:k]
        votes = np.bincount(labels[nbr], minlength=int(labels.max()) + 1)
        winners = np.flatnonzero(votes == votes.max())
        corrected.append(winners[0] if len(winners) == 1 else labels[i])
        agreements.append(sum(labels[j] == labels[i] for j in nbr) / k)
    return np.array(corrected), np.array(agreements)


def _cutoff_oracle(values, alpha):
    ordered = sorted(values)
    pos = (len(ordered) - 1) * alpha
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (pos - lo) * (ordered[hi] - ordered[lo])


def _two_clusters(rng, per_cluster=100, dim=8, noise_rate=0.3):
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 1] = 4.0, 4.0
    truth = np.repeat([0, 1], per_cluster)
    emb = centers[truth] + rng.standard_normal((2 * per_cluster, dim))
    flip = rng.random(len(truth)) < noise_rate
    noisy = np.where(flip, 1 - truth, truth)
    return emb, truth, noisy


class TestCosineSimilarity:
    def test_identity(self):
        assert cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_diagonal(self):
        assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70711, abs=1e-5)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])


class TestKnnAggregate:
    def test_majority_vote(self):
        angles = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5, np.pi])
        emb = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        labels = np.array([1, 1, 1, 1, 2, 2, 2])
        agg = knn_aggregate(emb, labels, RefineConfig(k_neighbors=5))
        assert agg.neighbors[0].tolist() == [1, 2, 3, 4, 5]
        assert agg.corrected_labels[0] == 1
        assert agg.agreements[0] == pytest.approx(0.6)

    def test_homogeneous(self):
        agg = knn_aggregate(np.ones((6, 3)), np.full(6, 2), RefineConfig(k_neighbors=3))
        np.testing.assert_array_equal(agg.agreements, 1.0)
        np.testing.assert_array_equal(agg.corrected_labels, 2)

    def test_ties_broken_by_example_id(self):
        ids = np.array([5, 3, 9, 1, 7])
        agg = knn_aggregate(np.ones((5, 2)), np.zeros(5, dtype=int), RefineConfig(k_neighbors=2), ids)
        # 编号 1 的样本在第 3 行，邻居应为编号 3 和 5
        assert ids[agg.neighbors[3]].tolist() == [3, 5]
        assert ids[agg.neighbors[1]].tolist() == [1, 5]

    def test_vote_tie_keeps_own_label(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.1], [1.0, -0.1], [-1.0, 0.0]])
        labels = np.array([0, 1, 2, 2])
        agg = knn_aggregate(emb, labels, RefineConfig(k_neighbors=2))
        assert agg.corrected_labels[0] == 0

    @pytest.mark.parametrize("seed,n", [(0, 12), (1, 60), (2, 120), (3, 200)])
    def test_matches_exhaustive_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        emb = rng.standard_normal((n, 5))
        labels = rng.integers(0, 4, size=n)
        ids = rng.permutation(1000)[:n]
        agg = knn_aggregate(emb, labels, RefineConfig(k_neighbors=7), ids)
        corrected, agreements = _knn_oracle(emb, labels, ids, 7)
        np.testing.assert_array_equal(agg.corrected_labels, corrected)
        np.testing.assert_allclose(agg.agreements, agreements)

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            knn_aggregate(np.eye(3), np.array([0, 1, 2]), RefineConfig(k_neighbors=3))


class TestSelectClean:
    def test_quantile_cutoff(self):
        agg = KnnAggregate(
            corrected_labels=np.zeros(4, dtype=np.int64),
            agreements=np.array([0.9, 0.8, 0.4, 0.2]),
            neighbors=np.zeros((4, 1), dtype=np.int64),
        )
        clean = select_clean(agg, np.zeros(4, dtype=np.int64), RefineConfig(alpha=0.5))
        assert clean.cutoffs[0] == pytest.approx(0.6)
        assert clean.member_ids.tolist() == [0, 1]
        assert clean.complement_ids.tolist() == [2, 3]

    def test_consensus_required(self):
        agg = KnnAggregate(np.array([0, 1, 0, 0]), np.array([0.9, 0.9, 0.1, 0.1]), np.zeros((4, 1), dtype=np.int64))
        clean = select_clean(agg, np.zeros(4, dtype=np.int64), RefineConfig(alpha=0.5))
        assert clean.member_ids.tolist() == [0]

    def test_tiny_alpha_selects_all(self, rng):
        agreements = rng.integers(0, 11, size=30) / 10
        labels = rng.integers(0, 3, size=30)
        agg = KnnAggregate(labels.copy(), agreements, np.zeros((30, 1), dtype=np.int64))
        clean = select_clean(agg, labels, RefineConfig(alpha=1e-15, min_class_size=1))
        assert len(clean) == 30

    def test_equal_agreements_saturate(self):
        agg = KnnAggregate(np.zeros(5, dtype=np.int64), np.full(5, 0.4), np.zeros((5, 1), dtype=np.int64))
        for alpha in (0.1, 0.5, 0.9):
            clean = select_clean(agg, np.zeros(5, dtype=np.int64), RefineConfig(alpha=alpha))
            assert len(clean) == 5

    def test_small_class_excluded(self):
        labels = np.array([0, 0, 0, 1])
        agg = KnnAggregate(labels.copy(), np.ones(4), np.zeros((4, 1), dtype=np.int64))
        clean = select_clean(agg, labels, RefineConfig(min_class_size=2))
        assert 3 not in clean.member_ids
        assert 1 not in clean.cutoffs

    def test_global_fractile_shares_cutoff(self):
        labels = np.array([0, 0, 1, 1])
        agg = KnnAggregate(labels.copy(), np.array([0.2, 0.4, 0.6, 0.8]), np.zeros((4, 1), dtype=np.int64))
        clean = select_clean(agg, labels, RefineConfig(alpha=0.5, global_fractile=True))
        assert clean.cutoffs == {0: pytest.approx(0.5), 1: pytest.approx(0.5)}
        assert clean.member_ids.tolist() == [2, 3]

    def test_matches_sort_based_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            k = int(rng.integers(1, 11))
            labels = rng.integers(0, int(rng.integers(2, 6)), size=n)
            corrected = np.where(rng.random(n) < 0.7, labels, rng.integers(0, 5, size=n))
            agreements = rng.integers(0, k + 1, size=n) / k
            config = RefineConfig(alpha=float(rng.uniform(0.01, 0.99)), min_class_size=int(rng.integers(1, 4)))
            clean = select_clean(KnnAggregate(corrected, agreements, np.zeros((n, 1), dtype=np.int64)), labels, config)

            expected_members, expected_cutoffs = [], {}
            for c in sorted(set(labels.tolist())):
                rows = [i for i in range(n) if labels[i] == c]
                if len(rows) < config.min_class_size:
                    continue
                cutoff = _cutoff_oracle([agreements[i] for i in rows], config.alpha)
                expected_cutoffs[c] = cutoff
                expected_members += [i for i in rows if agreements[i] >= cutoff - 1e-12 and corrected[i] == c]

            assert clean.member_ids.tolist() == sorted(expected_members)
            assert clean.cutoffs.keys() == expected_cutoffs.keys()
            for c, cutoff in expected_cutoffs.items():
                assert clean.cutoffs[c] == pytest.approx(cutoff, abs=1e-12)

    def test_empty(self):
        agg = KnnAggregate(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, 1), dtype=np.int64))
        assert len(select_clean(agg, np.zeros(0, dtype=np.int64), RefineConfig())) == 0

    def test_report_columns(self):
        labels = np.array([0, 0, 1, 1])
        agg = KnnAggregate(labels.copy(), np.array([0.5, 1.0, 1.0, 0.5]), np.zeros((4, 1), dtype=np.int64))
        clean = select_clean(agg, labels, RefineConfig(), example_ids=np.array([10, 11, 12, 13]))
        assert list(clean.report.columns) == ["example_id", "pseudo_label", "corrected_label", "agreement", "selected"]
        assert clean.report["selected"].sum() == len(clean)
        assert clean.label_map() == {int(i): int(c) for i, c in zip(clean.member_ids, clean.corrected_labels)}


class TestRefine:
    def test_nothing_selected(self, rng):
        batch = _batch([0, 1, 0], selected=[False, False, False])
        clean = refine(rng.standard_normal((3, 4)), batch, RefineConfig())
        assert len(clean) == 0

    def test_only_selected_rows_participate(self, rng):
        emb, _, noisy = _two_clusters(rng, per_cluster=20)
        selected = np.arange(40) % 2 == 0
        clean = refine(emb, _batch(noisy, selected, example_ids=np.arange(100, 140)), RefineConfig(k_neighbors=5))
        members = set(clean.member_ids.tolist()) | set(clean.complement_ids.tolist())
        assert members == set(range(100, 140, 2))

    def test_k_shrinks_for_small_pool(self, rng, caplog):
        batch = _batch([0, 0, 1, 1])
        clean = refine(rng.standard_normal((4, 3)), batch, RefineConfig(k_neighbors=10))
        assert len(clean) + len(clean.complement_ids) == 4
        assert "K 缩小为 3" in caplog.text

    def test_permutation_invariance(self, rng):
        emb, _, noisy = _two_clusters(rng, per_cluster=40)
        ids = np.arange(len(noisy)) * 3 + 1
        config = RefineConfig(k_neighbors=10, alpha=0.5)
        base = refine(emb, _batch(noisy, example_ids=ids), config)
        perm = rng.permutation(len(noisy))
        shuffled = refine(emb[perm], _batch(noisy[perm], example_ids=ids[perm]), config)
        assert set(base.member_ids.tolist()) == set(shuffled.member_ids.tolist())
        assert base.label_map() == shuffled.label_map()

    def test_alpha_monotonicity(self, rng):
        emb, _, noisy = _two_clusters(rng, per_cluster=50)
        batch = _batch(noisy)
        sizes = []
        for alpha in (0.1, 0.3, 0.5, 0.7, 0.9):
            clean = refine(emb, batch, RefineConfig(k_neighbors=10, alpha=alpha))
            per_class = np.bincount(clean.corrected_labels, minlength=2)
            sizes.append(per_class)
        for before, after in zip(sizes, sizes[1:]):
            assert np.all(after <= before)

    @pytest.mark.parametrize("seed", range(5))
    def test_noise_reduction(self, seed):
        rng = np.random.default_rng(seed)
        emb, truth, noisy = _two_clusters(rng)
        clean = refine(emb, _batch(noisy), RefineConfig(k_neighbors=10, alpha=0.5))
        raw_acc = np.mean(noisy == truth)
        clean_acc = np.mean(clean.corrected_labels == truth[clean.member_ids])
        assert len(clean) > 0
        assert clean_acc >= raw_acc + 0.05

    def test_invalid_alpha(self, rng):
        with pytest.raises(ConfigError):
            refine(rng.standard_normal((4, 2)), _batch([0, 1, 0, 1]), RefineConfig(alpha=1.0))
