from fractions import Fraction

import numpy as np
import pytest

from treecrop.evaluation import (DEFAULT_ALLOCATION, SamplePoint, change_strata,
                                 coefficient_of_variation, confusion, draw_design, f1_scores,
                                 pairwise_separability, read_samples_csv, separability_index,
                                 stratified_estimates, temporal_consistency, write_samples_csv)


def strata_raster(shape=(64, 64), k=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, k, shape)


class TestDesign:
    def test_default_allocation(self):
        assert sum(DEFAULT_ALLOCATION) == 1400

    def test_change_strata(self):
        a = np.array([[0, 1, 3, 0, 3, 0, 3, 2]])
        b = np.array([[0, 1, 3, 1, 1, 3, 0, 2]])
        np.testing.assert_array_equal(change_strata(a, b), [[0, 1, 2, 3, 4, 5, 6, -1]])

    def test_deterministic(self):
        s = strata_raster()
        d1, p1 = draw_design(None, 16, 8, (20, 20, 20), seed=4, strata=s)
        d2, p2 = draw_design(None, 16, 8, (20, 20, 20), seed=4, strata=s)
        assert p1 == p2 and d1.clusters == d2.clusters
        _, p3 = draw_design(None, 16, 8, (20, 20, 20), seed=5, strata=s)
        assert p1 != p3

    def test_points_inside_clusters_and_strata(self):
        s = strata_raster((70, 70))
        d, pts = draw_design(None, 16, 5, (30, 30, 30), seed=1, strata=s)
        assert len(d.clusters) == 5
        assert all(r + 16 <= 70 and c + 16 <= 70 for r, c in d.clusters)  # partial clusters dropped
        for p in pts:
            assert s[p.row, p.col] == p.stratum
            assert any(r <= p.row < r + 16 and c <= p.col < c + 16 for r, c in d.clusters)
        assert len({(p.row, p.col) for p in pts}) == len(pts)
        assert [p.point_id for p in pts] == list(range(90))

    def test_exhaustive_when_allocation_equals_size(self):
        s = strata_raster((32, 32))
        sizes = [int((s == h).sum()) for h in range(3)]
        d, pts = draw_design(None, 32, 1, sizes, seed=0, strata=s)
        assert len(pts) == 32 * 32
        np.testing.assert_array_equal(d.frame_sizes, sizes)

    def test_stratum_too_small(self):
        s = np.zeros((32, 32), int)
        s[0, 0] = 1
        with pytest.raises(ValueError, match="fewer than its allocation"):
            draw_design(None, 32, 1, (10, 2), seed=0, strata=s)

    def test_from_maps(self):
        # seven vertical bands, one per (before, after) transition
        pairs = [(0, 0), (1, 1), (3, 3), (0, 1), (3, 1), (0, 3), (3, 0)]
        before = np.zeros((32, 35), np.uint8)
        after = before.copy()
        for h, (x, y) in enumerate(pairs):
            before[:, 5 * h:5 * h + 5] = x
            after[:, 5 * h:5 * h + 5] = y
        middle = np.full_like(before, 2)
        d, pts = draw_design([before, middle, after], 32, 1, (5,) * 7, seed=0)
        np.testing.assert_array_equal(d.strata_areas, [160] * 7)
        assert [p.stratum for p in pts] == [h for h in range(7) for _ in range(5)]
        for p in pts:
            assert p.col // 5 == p.stratum
        with pytest.raises(ValueError, match="positive"):
            draw_design([before, after], 32, 1, (5, 0, 5, 5, 5, 5, 5), seed=0)
        with pytest.raises(ValueError, match="two epochs"):
            draw_design([before], 32, 1, seed=0)

    def test_inclusion_frequency_uniform(self):
        # one cluster covers the whole region, so pixel inclusion is n_h / N_h
        s = np.zeros((16, 16), int)
        s[:, 8:] = 1
        counts = np.zeros((16, 16))
        for seed in range(500):
            _, pts = draw_design(None, 16, 1, (16, 32), seed=seed, strata=s)
            for p in pts:
                counts[p.row, p.col] += 1
        for h, n, N in ((0, 16, 128), (1, 32, 128)):
            pi = n / N
            sd = np.sqrt(500 * pi * (1 - pi))
            assert np.all(np.abs(counts[s == h] - 500 * pi) <= 4 * sd)

    def test_csv_roundtrip(self, tmp_path):
        pts = [SamplePoint(0, 1, 2, 3, 1, 0), SamplePoint(1, 4, 5, 0)]
        write_samples_csv(tmp_path / "s.csv", pts)
        assert read_samples_csv(tmp_path / "s.csv") == pts


class TestConfusion:
    def test_perfect(self):
        y = np.array([0, 1, 2, 1, 0])
        m = confusion(y, y, y)
        assert np.all(m.counts == np.diag(np.diag(m.counts)))
        np.testing.assert_array_equal(np.diag(m.counts), [2, 2, 1])

    def test_single_wrong_pair(self):
        m = confusion([1], [0], [0], n_strata=2, n_classes=2)
        np.testing.assert_array_equal(m.counts, [[0, 1], [0, 0]])
        np.testing.assert_array_equal(m.pred_counts, [[0, 1], [0, 0]])

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        ref, pred, st = (rng.integers(0, 4, 300) for _ in range(3))
        m = confusion(ref, pred, st, n_strata=4, n_classes=4)
        for i in range(4):
            for j in range(4):
                assert m.counts[i, j] == np.sum((st == i) & (ref == j))
                assert m.pred_counts[i, j] == np.sum((pred == i) & (ref == j))

    def test_label_outside_set(self):
        with pytest.raises(ValueError, match="outside the class set"):
            confusion([0, 5], [0, 1], [0, 1], n_classes=3)

    def test_weights(self):
        m = confusion([0, 1], [0, 1], [0, 1]).with_areas([30, 10])
        np.testing.assert_allclose(m.weights, [0.75, 0.25])


class TestEstimates:
    def test_single_stratum_perfect(self):
        est = stratified_estimates(np.array([[5, 0], [0, 5]]), [300, 100])
        np.testing.assert_allclose(est.area, [300, 100])
        np.testing.assert_array_equal(est.se, 0)
        assert est.oa == 1.0

    def test_hand_example(self):
        n = np.array([[40, 10], [5, 45]])
        A = [600.0, 400.0]
        est = stratified_estimates(n, A)
        # p = W_i n_ij / n_i
        p = np.array([[0.6 * 0.8, 0.6 * 0.2], [0.4 * 0.1, 0.4 * 0.9]])
        np.testing.assert_allclose(est.proportions, p)
        np.testing.assert_allclose(est.area, [1000 * 0.52, 1000 * 0.48])
        se0 = 1000 * np.sqrt(0.36 * 0.8 * 0.2 / 49 + 0.16 * 0.1 * 0.9 / 49)
        np.testing.assert_allclose(est.se, [se0, se0])
        np.testing.assert_allclose(est.ci, 1.96 * est.se)
        assert est.oa == pytest.approx(0.48 + 0.36)
        np.testing.assert_allclose(est.ua, [0.8, 0.9])
        np.testing.assert_allclose(est.pa, [0.48 / 0.52, 0.36 / 0.48])
        assert 0 <= est.oa <= 1 and np.all((est.pa >= 0) & (est.pa <= 1))
        d = est.to_dict(["a", "b"])
        assert d["classes"][0]["class"] == "a"

    def test_exact_total(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = rng.integers(1, 50, (7, 4))
            A = rng.integers(100, 10_000, 7)
            est = stratified_estimates(n, A)
            assert sum(est.area_exact) == Fraction(int(A.sum()))
            assert np.all(est.ci >= 0)

    def test_census_recovers_truth(self):
        rng = np.random.default_rng(5)
        strata = rng.integers(0, 3, (40, 40))
        truth = np.where(rng.random((40, 40)) < 0.8, strata, rng.integers(0, 3, (40, 40)))
        A = [int((strata == h).sum()) for h in range(3)]
        m = confusion(truth.ravel(), strata.ravel(), strata.ravel(), 3, 3)
        est = stratified_estimates(m, A)
        for j in range(3):
            assert est.area_exact[j] == int((truth == j).sum())

    def test_errors(self):
        with pytest.raises(ValueError, match="zero-sample stratum"):
            stratified_estimates(np.array([[3, 1], [0, 0]]), [1, 1])
        with pytest.raises(ValueError):
            stratified_estimates(np.array([[3, 1], [1, 0]]), [1, 1])


class TestF1:
    def test_perfect(self):
        np.testing.assert_array_equal(f1_scores(np.diag([3, 4, 5])), 1.0)

    def test_half(self):
        c = np.array([[1, 1], [1, 1]])
        np.testing.assert_allclose(f1_scores(c), [0.5, 0.5])

    def test_random_vs_formula(self):
        rng = np.random.default_rng(1)
        c = rng.integers(1, 30, (4, 4))
        f = f1_scores(c)
        for k in range(4):
            prec = c[k, k] / c[k].sum()
            rec = c[k, k] / c[:, k].sum()
            assert f[k] == pytest.approx(2 * prec * rec / (prec + rec))

    def test_empty_class(self):
        with pytest.raises(ValueError, match="empty class"):
            f1_scores(np.array([[2, 0], [0, 0]]))

    def test_f1_one_iff_diagonal(self):
        c = np.array([[5, 0, 0], [0, 3, 1], [0, 0, 2]])
        f = f1_scores(c)
        assert f[0] == 1.0 and f[1] < 1 and f[2] < 1


class TestClusterMetrics:
    def test_identical_clusters(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        assert separability_index(x, x) == 0

    def test_one_dimensional(self):
        a = np.array([-1.0, 1.0])
        b = np.array([1.0, 3.0])
        assert separability_index(a, b) == pytest.approx(1.0)
        assert coefficient_of_variation(np.array([1.0, 3.0])) == pytest.approx(0.5)

    def test_scale_and_rotation_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(30, 5))
        b = rng.normal(loc=2, size=(25, 5))
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        si = separability_index(a, b)
        assert separability_index(3.5 * a, 3.5 * b) == pytest.approx(si)
        assert separability_index(a @ Q, b @ Q) == pytest.approx(si)
        cv = coefficient_of_variation(b)
        assert coefficient_of_variation(7 * b) == pytest.approx(cv)
        assert coefficient_of_variation(b @ Q) == pytest.approx(cv)

    def test_per_dimension(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(400, 1))
        b = rng.normal(loc=1.0, size=(400, 1))
        one = separability_index(a, b)
        wide = separability_index(np.tile(a, 16), np.tile(b, 16))
        assert wide == pytest.approx(4 * one)
        assert separability_index(np.tile(a, 16), np.tile(b, 16), per_dimension=True) == \
            pytest.approx(one)

    def test_errors(self):
        with pytest.raises(ValueError, match="degenerate"):
            separability_index(np.ones((1, 2)), np.ones((3, 2)))
        with pytest.raises(ValueError, match="undefined CV"):
            coefficient_of_variation(np.array([[1.0], [-1.0]]))
        assert coefficient_of_variation(np.ones((4, 2))) == 0

    def test_pairwise(self):
        x = np.concatenate([np.zeros((3, 2)), np.ones((3, 2)), [[5.0, 5.0]]])
        a = np.array([0, 0, 0, 1, 1, 1, 2])
        x[[0, 3]] += 0.1
        assert len(pairwise_separability(x, a)) == 1


class TestTemporalConsistency:
    def test_identical(self):
        m = np.ones((4, 4), np.uint8)
        assert temporal_consistency([m, m, m], [(0, 0), (1, 2)]) == 1.0

    def test_one_flip(self):
        maps = [np.ones((2, 2), np.uint8) for _ in range(3)]
        maps[1][0, 1] = 3
        pts = [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert temporal_consistency(maps, pts) == 0.75

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(4)
        maps = [rng.choice([0, 1], size=(10, 10), p=[0.2, 0.8]).astype(np.uint8) for _ in range(4)]
        pts = [SamplePoint(i, int(r), int(c), 0) for i, (r, c) in enumerate(rng.integers(0, 10, (50, 2)))]
        expected = np.mean([all(m[p.row, p.col] == 1 for m in maps) for p in pts])
        assert temporal_consistency(maps, pts) == expected

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            temporal_consistency([np.ones((2, 2)), np.ones((3, 2))], [(0, 0)])
