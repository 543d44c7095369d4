import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nucleistyle.clustering import (DomainClusterer, HsvHistogram, PcaEmbedding, assign, clahe,
                                    cluster_purity, extract_features, lloyd, project, rgb_to_hsv)
from nucleistyle.data import SynthCorpusConfig, generate_synth_corpus


def hsv_to_rgb_oracle(h, s, v):
    """Textbook sector formula."""
    i = int(np.floor(h * 6)) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


class TestHsv:
    def test_red(self):
        assert np.allclose(rgb_to_hsv(np.array([[[1.0, 0, 0]]]))[0, 0], [0, 1, 1])

    def test_gray(self):
        h, s, v = rgb_to_hsv(np.full((1, 1, 3), 0.5))[0, 0]
        assert (h, s, v) == (0.0, 0.0, 0.5)

    def test_inverse_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.random((20, 20, 3))
        hsv = rgb_to_hsv(img)
        assert hsv[..., 0].min() >= 0 and hsv[..., 0].max() < 1
        back = np.array([[hsv_to_rgb_oracle(*hsv[r, c]) for c in range(20)] for r in range(20)])
        assert np.abs(back - img).max() < 1e-6


class TestClahe:
    def test_constant(self):
        x = np.full((32, 32), 0.3)
        assert np.abs(clahe(x) - x).max() <= 1 / 256

    def test_degenerate(self):
        x = np.array([[0.7]])
        assert np.array_equal(clahe(x), x)

    def test_ramp_gains_contrast(self):
        ramp = np.tile(np.linspace(0.4, 0.5, 64), (64, 1))
        assert clahe(ramp).std() > ramp.std()

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 40), st.integers(2, 40)),
                      elements=st.floats(0, 1)))
    def test_range(self, x):
        out = clahe(x)
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1

    def test_indivisible_shape(self):
        x = np.random.default_rng(1).random((37, 21))
        assert clahe(x, tile_grid=(8, 8)).shape == (37, 21)


class TestFeatures:
    def test_gray_saturation_in_bin0(self):
        f = extract_features(np.full((8, 8, 3), 0.5))
        assert f[16] == 1.0 and f[17:32].sum() == 0

    def test_blocks_sum_to_one(self):
        f = extract_features(np.random.default_rng(2).random((30, 30, 3)))
        assert f.shape == (48,)
        assert np.all(f >= 0)
        for b in range(3):
            assert abs(f[16 * b:16 * (b + 1)].sum() - 1) < 1e-9

    def test_permutation_invariant_without_clahe(self):
        img = np.random.default_rng(3).random((10, 10, 3))
        perm = np.random.default_rng(4).permutation(100)
        shuffled = img.reshape(100, 3)[perm].reshape(10, 10, 3)
        a = extract_features(img, clahe_v=False)
        b = extract_features(shuffled, clahe_v=False)
        assert np.array_equal(a, b)

    def test_estimator(self):
        imgs = np.random.default_rng(5).random((3, 8, 8, 3))
        est = HsvHistogram(bins=8)
        assert est.fit_transform(imgs).shape == (3, 24)
        assert est.get_params()["bins"] == 8


def planted(seed=0, n=30, spread=0.01):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0, 0], [5, 0, 0], [0, 5, 5.0]])
    labels = np.repeat(np.arange(3), n)
    return centers[labels] + spread * rng.standard_normal((3 * n, 3)), labels


def same_partition(a, b):
    return all((a[i] == a[j]) == (b[i] == b[j]) for i in range(len(a)) for j in range(len(a)))


class TestKMeans:
    def test_planted_partition(self):
        X, truth = planted()
        model = DomainClusterer(n_clusters=3, random_state=1).fit(X)
        assert same_partition(model.labels_, truth)

    def test_k1_mean(self):
        X, _ = planted()
        model = DomainClusterer(n_clusters=1).fit(X)
        assert np.allclose(model.cluster_centers_[0], X.mean(axis=0), atol=1e-12)

    def test_duplicated_points(self):
        X, _ = planted(spread=0.5)
        a = DomainClusterer(n_clusters=3, random_state=0).fit(X)
        b = DomainClusterer(n_clusters=3, random_state=0).fit(np.concatenate([X, X]))
        ca = a.cluster_centers_[np.lexsort(a.cluster_centers_.T)]
        cb = b.cluster_centers_[np.lexsort(b.cluster_centers_.T)]
        assert np.abs(ca - cb).max() < 1e-9

    def test_inertia_monotone_every_run(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            X = rng.random((40, 4))
            model = DomainClusterer(n_clusters=4, n_init=1, random_state=int(rng.integers(1000))).fit(X)
            h = np.array(model.inertia_history_)
            assert np.all(np.diff(h) <= 1e-12)

    def test_refit_from_converged_is_stable(self):
        X = np.random.default_rng(7).random((50, 3))
        model = DomainClusterer(n_clusters=4).fit(X)
        _, labels, _ = lloyd(X, model.cluster_centers_)
        assert np.array_equal(labels, model.labels_)
        assert np.array_equal(model.predict(X), model.labels_)

    def test_deterministic(self):
        X = np.random.default_rng(8).random((50, 3))
        a = DomainClusterer(n_clusters=4, random_state=3).fit(X)
        b = DomainClusterer(n_clusters=4, random_state=3).fit(X)
        assert np.array_equal(a.cluster_centers_, b.cluster_centers_)

    def test_too_few_distinct(self):
        with pytest.raises(ValueError):
            DomainClusterer(n_clusters=3).fit(np.array([[0.0], [0.0], [1.0]]))

    def test_assign(self):
        model = DomainClusterer(n_clusters=4, n_init=1).fit(np.random.default_rng(9).random((20, 2)))
        model.cluster_centers_ = np.array([[0.0, 0], [1, 0], [5, 5], [-1, 0]])
        assert assign(model, [5, 5]) == 2
        assert assign(model, [0, 0]) == 0
        model.cluster_centers_ = np.array([[9.0, 9], [1, 0], [5, 5], [-1, 0]])
        assert assign(model, [0, 0]) == 1  # tie between 1 and 3
        with pytest.raises(ValueError):
            assign(model, [0, 0, 0])

    def test_synthetic_purity(self):
        samples = generate_synth_corpus(SynthCorpusConfig(num_domains=6, images_per_domain=10, seed=2))
        feats = HsvHistogram().transform([s.image for s in samples])
        labels = DomainClusterer(n_clusters=6).fit_predict(feats)
        assert cluster_purity(labels, [s.domain for s in samples]) >= 0.95


class TestPca:
    def test_orthonormal_and_ordered(self):
        X = np.random.default_rng(10).random((30, 6))
        p = PcaEmbedding().fit(X)
        assert np.allclose(p.components_ @ p.components_.T, np.eye(2), atol=1e-6)
        assert p.explained_variance_[0] >= p.explained_variance_[1] >= 0
        assert p.explained_variance_.sum() <= p.total_variance_ + 1e-12

    def test_collinear(self):
        t = np.random.default_rng(11).random(20)
        X = np.zeros((20, 48))
        X[:, 3], X[:, 7] = t, 2 * t
        assert PcaEmbedding().fit(X).explained_variance_[1] <= 1e-9

    def test_mean_projects_to_origin(self):
        X = np.random.default_rng(12).random((10, 5))
        p = PcaEmbedding().fit(X)
        assert np.allclose(project(p, X.mean(axis=0)), (0, 0), atol=1e-12)

    def test_two_components_reconstruct_better(self):
        X = np.random.default_rng(13).random((40, 8))
        errs = []
        for k in (1, 2):
            p = PcaEmbedding(k).fit(X)
            errs.append(((p.inverse_transform(p.transform(X)) - X) ** 2).sum())
        assert errs[1] <= errs[0]

    @pytest.mark.parametrize("X", [np.zeros((2, 3)), np.ones((5, 3))])
    def test_rejects(self, X):
        with pytest.raises(ValueError):
            PcaEmbedding().fit(X)


def test_purity_helper():
    assert cluster_purity([0, 0, 1, 1], [5, 5, 6, 5]) == 0.75
