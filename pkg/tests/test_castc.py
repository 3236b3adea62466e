from fractions import Fraction

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from treecrop import nn
from treecrop.castc import (HIGH, LOW, Autoencoder, AutoencoderConfig, ClusterModel,
                            density_score, grid_patches, kl_divergence, kl_gradients,
                            kmeans_init, label_clusters, patch_truth, pretrain_autoencoder,
                            refine, soft_assign, target_distribution)

TINY = AutoencoderConfig(patch_size=8, depth=2, base_channels=2, max_channels=3, bands=2,
                         timesteps=3, frame_dim=4, lstm_hidden=3, attention_dim=3, embed_dim=2,
                         decoder_hidden=4)


def blobs(seed=0, K=3, n=60, d=4, spread=5.0):
    rng = np.random.default_rng(seed)
    mu = rng.normal(scale=spread, size=(K, d))
    return np.concatenate([mu[k] + rng.normal(size=(n, d)) for k in range(K)]), np.repeat(np.arange(K), n)


class TestAutoencoder:
    def test_shapes(self):
        m = Autoencoder.build(TINY, 0)
        x = np.random.default_rng(0).random((5, 3, 2, 8, 8)).astype(np.float32)
        emb, _ = m.encode(x)
        assert emb.shape == (5, 2)
        rec, _ = m.decode(emb, 3)
        assert rec.shape == x.shape
        np.testing.assert_array_equal(m.embed(x[0]), emb[0])

    def test_gradients(self):
        m = Autoencoder.build(TINY, 1)
        m.params = m.params.astype(np.float64)
        x = np.random.default_rng(1).random((2, 3, 2, 8, 8))
        _, grads = m.reconstruction_loss(x)
        rng = np.random.default_rng(2)
        for name in ("enc.conv0.w", "enc.lstm.f.wh", "enc.att.v", "enc.embed.w", "dec.lstm.wx",
                     "dec.up0.w", "dec.out.b"):
            p = m.params[name]
            # probe a handful of coordinates per tensor
            idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(3)]
            for i in idx:
                def f():
                    return m.reconstruction_loss(x)[0]
                old = p[i]
                p[i] = old + 1e-5
                fp = f()
                p[i] = old - 1e-5
                fm = f()
                p[i] = old
                num = (fp - fm) / 2e-5
                assert abs(num - grads[name][i]) <= 1e-4 * max(1e-3, abs(num)) + 1e-9, name

    def test_pretrain_reduces_loss(self):
        x = np.random.default_rng(3).random((12, 3, 2, 8, 8)).astype(np.float32)
        _, curve = pretrain_autoencoder(x, epochs=8, seed=0, lr=3e-3, batch_size=4, config=TINY)
        assert curve[-1][1] < curve[0][1]

    def test_pretrain_deterministic(self):
        x = np.random.default_rng(3).random((6, 3, 2, 8, 8)).astype(np.float32)
        a, _ = pretrain_autoencoder(x, epochs=2, seed=5, config=TINY)
        b, _ = pretrain_autoencoder(x, epochs=2, seed=5, config=TINY)
        assert a.params.digest() == b.params.digest()

    def test_bad_patch(self):
        with pytest.raises(ValueError):
            AutoencoderConfig(patch_size=30, depth=4)


class TestSoftAssign:
    def test_hand_example(self):
        q = soft_assign(np.array([[0.0]]), np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(q, [[5 / 6, 1 / 6]], atol=1e-12)

    def test_rows_and_translation(self):
        rng = np.random.default_rng(0)
        z, M = rng.normal(size=(10, 3)), rng.normal(size=(4, 3))
        q = soft_assign(z, M)
        np.testing.assert_allclose(q.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(soft_assign(z + 7.5, M + 7.5), q, atol=1e-12)

    def test_closer_is_likelier(self):
        q = soft_assign(np.array([[0.1, 0.0]]), np.array([[0.0, 0.0], [3.0, 0.0]]))
        assert q[0, 0] > q[0, 1]


class TestTarget:
    def test_one_hot_fixpoint(self):
        Q = np.eye(3)
        np.testing.assert_array_equal(target_distribution(Q), Q)
        assert kl_divergence(Q, Q) == 0

    def test_uniform(self):
        Q = np.full((4, 2), 0.5)
        np.testing.assert_allclose(target_distribution(Q), Q)

    def test_hand_3x2(self):
        Q = np.array([[0.8, 0.2], [0.4, 0.6], [0.5, 0.5]])
        f = Q.sum(axis=0)                   # 1.7, 1.3
        w = Q ** 2 / f
        np.testing.assert_allclose(target_distribution(Q), w / w.sum(axis=1, keepdims=True))
        r0 = np.array([0.64 / 1.7, 0.04 / 1.3])
        np.testing.assert_allclose(target_distribution(Q)[0], r0 / r0.sum())

    def test_rows_and_kl(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            Q = soft_assign(rng.normal(size=(30, 2)), rng.normal(size=(5, 2)))
            P = target_distribution(Q)
            np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-12)
            assert np.all(P >= 0)
            assert kl_divergence(P, Q) > 0

    def test_sharpening_with_equal_frequencies(self):
        # with equal f_j, p is q^2 renormalised and max p = max q^2 / sum q^2 >= max q
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = rng.dirichlet(np.ones(4), size=6)
            Q = np.concatenate([np.roll(q, k, axis=1) for k in range(4)])
            P = target_distribution(Q)
            assert np.all(P.max(axis=1) >= Q.max(axis=1))

    def test_sharpening_can_fail_for_a_dominant_cluster(self):
        # the row's favourite cluster is also the most populated one, so the
        # frequency division pulls the row's largest target below its largest q
        Q = np.array([[0.36, 0.64], [0.26, 0.74], [0.06, 0.94]])
        P = target_distribution(Q)
        w = np.array([0.36 ** 2 / 0.68, 0.64 ** 2 / 2.32])
        np.testing.assert_allclose(P[0], w / w.sum())
        assert P[0].max() < Q[0].max()

    def test_collapsed(self):
        with pytest.raises(ValueError, match="collapsed cluster"):
            target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))

    def test_centroid_gradient(self):
        rng = np.random.default_rng(4)
        z, M = rng.normal(size=(8, 2)), rng.normal(size=(3, 2))
        P = target_distribution(soft_assign(z, M))
        _, _, dM = kl_gradients(z, M, P)
        num = numeric_grad(lambda: kl_divergence(P, soft_assign(z, M)), M)
        assert rel_error(dM, num) <= 1e-3


class TestKMeansAndRefine:
    def test_kmeans_recovers_blobs(self):
        X, y = blobs()
        C, a = kmeans_init(X, 3, 0)
        # a fixpoint: every point sits with its nearest centre
        d = ((X[:, None] - C[None]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(d.argmin(axis=1), a)
        for k in range(3):
            assert len(np.unique(a[y == k])) == 1

    def test_kmeans_deterministic_and_errors(self):
        X, _ = blobs()
        np.testing.assert_array_equal(kmeans_init(X, 3, 9)[0], kmeans_init(X, 3, 9)[0])
        with pytest.raises(ValueError):
            kmeans_init(np.ones((5, 2)), 3, 0)
        with pytest.raises(ValueError):
            kmeans_init(X, 3, 0, n_init=0)

    def test_restarts_never_worsen_inertia(self):
        def inertia(X, C, a):
            return ((X - C[a]) ** 2).sum()
        for seed in range(8):
            X, _ = blobs(seed=seed, K=5, spread=3.0)
            one = inertia(X, *kmeans_init(X, 5, seed, n_init=1))
            many = inertia(X, *kmeans_init(X, 5, seed, n_init=10))
            assert many <= one + 1e-9

    def test_k_distinct_points_are_the_centres(self):
        X = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 5.0]])
        C, a = kmeans_init(X, 3, 0)
        np.testing.assert_allclose(C[a], X)

    def test_refine_blobs(self):
        X, _ = blobs(seed=2)
        C, _ = kmeans_init(X, 3, 0)
        r = refine(None, C, X, epochs=5, seed=0, lr=1e-2)
        assert r.kl_curve[5] <= r.kl_curve[0]
        assert np.all(np.diff(r.kl_curve) <= 1e-6)

    def test_refine_fixpoint(self):
        # centres on far-apart one-point clusters: Q is one-hot to machine precision
        X = np.array([[0.0, 0.0], [1e9, 0.0]])
        r = refine(None, X.copy(), X, epochs=2, seed=0)
        assert r.kl_curve[0] == pytest.approx(0, abs=1e-12)
        np.testing.assert_allclose(r.centroids, X, atol=1e-6)

    def test_refine_with_encoder(self):
        x = np.random.default_rng(5).random((10, 3, 2, 8, 8)).astype(np.float32)
        m = Autoencoder.build(TINY, 0)
        C, _ = kmeans_init(m.embed(x).astype(np.float64), 2, 0)
        before = m.params.digest()
        r = refine(m, C, x, epochs=2, seed=0, lr=1e-3, batch_size=5)
        assert len(r.kl_curve) == 3 and r.encoder.params.digest() != before
        assert r.assignments.shape == (10,)


class TestLabels:
    def test_explicit_mapping(self):
        m = ClusterModel(np.zeros((10, 2)))
        ref = {j: (HIGH if j < 5 else LOW) for j in range(10)}
        out = label_clusters(m, ref)
        assert out.labels == [ref[j] for j in range(10)]
        with pytest.raises(ValueError, match="unlabeled cluster"):
            label_clusters(m, {0: HIGH})

    def test_majority(self):
        m = ClusterModel(np.zeros((2, 2)))
        truth = np.array([1, 1, 1, 0, 0, 0, 0, 0, 1, 1])
        assign = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
        assert label_clusters(m, truth, assign).labels == [HIGH, LOW]

    def test_unlabeled_cluster(self):
        m = ClusterModel(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="unlabeled"):
            ClusterModel(np.zeros((2, 2)), labels=[HIGH, None]).is_high()
        with pytest.raises(ValueError, match="unlabeled"):
            label_clusters(m, np.array([1, 1]), np.array([0, 0]))

    def test_save_load(self, tmp_path):
        m = ClusterModel(np.arange(6.0).reshape(3, 2), 1.0, [HIGH, LOW, HIGH])
        m.save(tmp_path / "c.clus")
        m2 = ClusterModel.load(tmp_path / "c.clus")
        np.testing.assert_array_equal(m2.centroids, m.centroids)
        assert m2.labels == m.labels


class TestGrid:
    def test_grid_patches(self):
        v = np.arange(2 * 1 * 64 * 96, dtype=np.float32).reshape(2, 1, 64, 96)
        p, g = grid_patches(v, 32)
        assert g == (2, 3)
        np.testing.assert_array_equal(p[4], v[..., 32:64, 32:64])

    def test_patch_truth(self):
        d = np.full((64, 64), 255, np.uint8)
        d[:32, :32] = 1
        d[:32, 32:] = 0
        d[32:, :20] = 1
        out = patch_truth(d, 32)
        np.testing.assert_array_equal(out, [[1, 0], [1, 255]])


class TestDensityScore:
    model = ClusterModel(np.zeros((2, 2)), labels=[HIGH, LOW])

    def test_all_high(self):
        codes = np.ones((64, 64), np.uint8)
        out = density_score(codes, np.zeros((2, 2), int), self.model)
        assert out.scores == {1: Fraction(1)} and out.is_high(1)

    def test_two_of_five(self):
        codes = np.full((32, 160), 3, np.uint8)
        codes[:, :] = 1
        assign = np.array([[0, 1, 0, 1, 1]])
        out = density_score(codes, assign, self.model)
        assert out.scores[1] == Fraction(2, 5) and not out.is_high(1)
        assert out.class_plane()[0, 0] == 0

    def test_half_is_high(self):
        codes = np.ones((32, 64), np.uint8)
        out = density_score(codes, np.array([[0, 1]]), self.model)
        assert out.scores[1] == Fraction(1, 2) and out.is_high(1)

    def test_coverage_rule(self):
        codes = np.full((32, 64), 3, np.uint8)
        codes[:, :32] = 1
        codes[:8, 32:40] = 1        # 64 px in the second cell, 1/16 < 1/4: not counted
        out = density_score(codes, np.array([[0, 1]]), self.model)
        assert out.counts[1] == (1, 1)

    def test_exact_rationals(self):
        rng = np.random.default_rng(0)
        codes = np.kron(rng.choice([1, 3], size=(6, 6), p=[0.6, 0.4]), np.ones((32, 32), np.uint8))
        assign = rng.integers(0, 2, (6, 6))
        out = density_score(codes.astype(np.uint8), assign, self.model, skip_empty=True)
        for cid, s in out.scores.items():
            n_high, n_all = out.counts[cid]
            assert s * n_all == n_high

    def test_empty_component(self):
        codes = np.full((64, 64), 3, np.uint8)
        codes[0, 0] = 1
        with pytest.raises(ValueError, match="no counted patches"):
            density_score(codes, np.zeros((2, 2), int), self.model)
        out = density_score(codes, np.zeros((2, 2), int), self.model, skip_empty=True)
        assert out.skipped == [1]

    def test_missing_assignment(self):
        codes = np.ones((32, 32), np.uint8)
        with pytest.raises(ValueError, match="no cluster assignment"):
            density_score(codes, np.array([[-1]]), self.model)
