"""Modality discovery: HSV histogram features, CLAHE, K-means and a 2-D PCA embedding."""
from __future__ import annotations

import logging

import numpy as np
from skimage import color, exposure
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_image

logger = logging.getLogger(__name__)


def rgb_to_hsv(image):
    """Hexcone HSV of an RGB image in [0, 1]. Hue lies in [0, 1); gray pixels get hue 0."""
    hsv = color.rgb2hsv(check_image(image))
    hsv[..., 0] = np.mod(hsv[..., 0], 1.0)
    return hsv


def clahe(channel, clip_limit=0.01, tile_grid=(8, 8), nbins=256):
    """Contrast-limited adaptive histogram equalization of one [0, 1] channel.

    ``clip_limit`` is the fraction of a tile's pixels allowed per bin. Images
    that do not divide into ``tile_grid`` are padded and cropped back.
    """
    if clip_limit <= 0:
        raise ValueError("clip_limit must be > 0")
    ch = np.asarray(channel, dtype=np.float64)
    if ch.ndim != 2:
        raise ValueError("clahe expects a single 2-D channel")
    if ch.shape[0] <= 1 or ch.shape[1] <= 1:
        return ch.copy()
    if np.ptp(ch) == 0:
        # a single occupied bin maps onto itself
        return ch.copy()
    gh, gw = tile_grid
    kernel = (max(1, int(np.ceil(ch.shape[0] / gh))), max(1, int(np.ceil(ch.shape[1] / gw))))
    out = exposure.equalize_adapthist(ch, kernel_size=kernel, clip_limit=clip_limit, nbins=nbins)
    return np.clip(out, 0.0, 1.0)


class HsvHistogram(BaseEstimator, TransformerMixin):
    """Images -> concatenated normalized H, S and V histograms (``3 * bins`` features).

    With ``clahe_v`` the V channel is contrast-enhanced before binning.
    """

    def __init__(self, bins=16, clahe_v=True, clip_limit=0.01, tile_grid=(8, 8)):
        self.bins = bins
        self.clahe_v = clahe_v
        self.clip_limit = clip_limit
        self.tile_grid = tile_grid

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return np.stack([self.features(im) for im in X])

    def features(self, image):
        hsv = rgb_to_hsv(image)
        if self.clahe_v:
            hsv[..., 2] = clahe(hsv[..., 2], self.clip_limit, self.tile_grid)
        edges = np.linspace(0.0, 1.0, self.bins + 1)
        blocks = []
        for c in range(3):
            hist, _ = np.histogram(hsv[..., c], bins=edges)
            blocks.append(hist / hist.sum())
        return np.concatenate(blocks)


def extract_features(image, bins=16, clahe_v=True):
    return HsvHistogram(bins=bins, clahe_v=clahe_v).features(image)


# ---------------------------------------------------------------- K-means

def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(X, centers):
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def nearest_centroid(X, centers):
    """Index of the closest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(X, centers), axis=1)


def lloyd(X, centers, max_iter=300, tol=0.0):
    """Lloyd iterations from ``centers``. Returns ``(centers, labels, inertia_history)``.

    Stops when assignments no longer change. Raises if inertia ever increases
    beyond round-off, which would indicate a bug.
    """
    centers = centers.copy()
    labels = nearest_centroid(X, centers)
    history = [float(_sq_dists(X, centers)[np.arange(len(X)), labels].sum())]
    for _ in range(max_iter):
        for j in range(len(centers)):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        new_labels = nearest_centroid(X, centers)
        inertia = float(_sq_dists(X, centers)[np.arange(len(X)), new_labels].sum())
        if inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise RuntimeError(f"K-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels, history


class DomainClusterer(BaseEstimator, ClusterMixin):
    """K-means (k-means++ seeding, best of ``n_init`` restarts) on feature vectors.

    ``fit`` accepts an ``(n_samples, n_features)`` array; use
    :class:`HsvHistogram` to turn images into features first.
    """

    def __init__(self, n_clusters=6, n_init=10, max_iter=300, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        n_distinct = len(np.unique(X, axis=0))
        if n_distinct < self.n_clusters:
            raise ValueError(f"{n_distinct} distinct points cannot form {self.n_clusters} clusters")
        rng = np.random.default_rng(self.random_state)
        best = None
        self.run_histories_ = []
        for _ in range(self.n_init):
            init = _kmeans_pp(X, self.n_clusters, rng)
            centers, labels, history = lloyd(X, init, self.max_iter)
            self.run_histories_.append(history)
            if best is None or history[-1] < best[2][-1]:
                best = (centers, labels, history)
        self.cluster_centers_, self.labels_, self.inertia_history_ = best
        self.inertia_ = self.inertia_history_[-1]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return nearest_centroid(X, self.cluster_centers_)


def assign(model: DomainClusterer, feature):
    return int(model.predict(np.asarray(feature)[None])[0])


# ---------------------------------------------------------------- PCA

class PcaEmbedding(BaseEstimator, TransformerMixin):
    """Top principal axes of mean-centred features via eigendecomposition of the covariance."""

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if len(X) < 3:
            raise ValueError("PCA needs at least 3 samples")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / (len(X) - 1)
        if not np.any(np.abs(cov) > 0):
            raise ValueError("features have zero variance")
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][: self.n_components]
        self.explained_variance_ = np.clip(evals[order], 0, None)
        self.components_ = evecs[:, order].T
        self.total_variance_ = float(np.trace(cov))
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components_ + self.mean_


def project(model: PcaEmbedding, feature):
    x, y = model.transform(feature)[0][:2]
    return float(x), float(y)


def cluster_purity(labels, truth):
    """Fraction of points whose cluster's majority true label matches their own."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        _, counts = np.unique(truth[labels == c], return_counts=True)
        hits += counts.max()
    return hits / len(labels)


def dark_clusters(images, labels, threshold=0.25):
    """Cluster ids whose mean V (HSV value) is below ``threshold``."""
    labels = np.asarray(labels)
    values = np.array([rgb_to_hsv(im)[..., 2].mean() for im in images])
    return sorted(int(c) for c in np.unique(labels) if values[labels == c].mean() < threshold)


def enhance_image(image, clip_limit=0.01, tile_grid=(8, 8)):
    """Apply CLAHE to the V channel and convert back to RGB."""
    hsv = rgb_to_hsv(image)
    hsv[..., 2] = clahe(hsv[..., 2], clip_limit, tile_grid)
    return np.clip(color.hsv2rgb(hsv), 0, 1)
