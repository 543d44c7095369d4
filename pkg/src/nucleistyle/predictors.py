"""Stand-in instance predictors honouring the ``image -> (masks, confidences)`` contract."""
from __future__ import annotations

import hashlib
import subprocess
import tempfile
from pathlib import Path

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .data import read_mask, write_image
from .metrics import dsb_map
from .validation import check_image


def _image_key(image):
    return hashlib.sha1(np.ascontiguousarray(np.round(image * 255).astype(np.uint8)).tobytes()).hexdigest()


class EmptyPredictor:
    def __call__(self, image):
        h, w = np.asarray(image).shape[:2]
        return np.zeros((0, h, w), bool), np.zeros(0)


def _dihedral(a, k, flip, axes):
    a = np.rot90(a, k, axes=axes)
    return np.flip(a, axis=axes[1]) if flip else a


class OraclePredictor:
    """Returns the ground truth of a known image (looked up by pixel content).

    Rotated and flipped copies of known images are recognised too, so the
    oracle also works under geometric test-time augmentation.
    """

    def __init__(self, samples):
        self._table = {}
        for s in samples:
            if s.masks is None:
                continue
            for k in range(4):
                for flip in (False, True):
                    key = _image_key(_dihedral(s.image, k, flip, (0, 1)))
                    self._table.setdefault(key, (s.masks, k, flip))

    def __call__(self, image):
        key = _image_key(check_image(image))
        if key not in self._table:
            raise KeyError("oracle predictor has no ground truth for this image")
        masks, k, flip = self._table[key]
        masks = np.ascontiguousarray(_dihedral(masks, k, flip, (1, 2)))
        return masks, np.ones(len(masks))


class BlobPredictor(BaseEstimator):
    """Threshold the smoothed colour distance to the image's median (background) colour.

    Connected components above ``threshold`` become instances. ``fit`` chooses
    the threshold from ``candidates`` that maximizes mean score on labelled samples.
    """

    def __init__(self, threshold=0.25, sigma=1.0, min_size=6, candidates=None):
        self.threshold = threshold
        self.sigma = sigma
        self.min_size = min_size
        self.candidates = candidates

    def score_map(self, image):
        image = check_image(image)
        smooth = ndimage.gaussian_filter(image, sigma=(self.sigma, self.sigma, 0)) if self.sigma else image
        background = np.median(smooth.reshape(-1, 3), axis=0)
        return np.linalg.norm(smooth - background, axis=2) / np.sqrt(3)

    def _components(self, score, threshold):
        labels, n = ndimage.label(score > threshold)
        if n == 0:
            return np.zeros((0,) + score.shape, bool), np.zeros(0)
        idx = np.arange(1, n + 1)
        sizes = ndimage.sum_labels(np.ones_like(score), labels, index=idx)
        means = ndimage.mean(score, labels, index=idx)
        keep = np.flatnonzero(sizes >= self.min_size) + 1
        masks = labels[None] == keep[:, None, None]
        return masks, np.clip(means[keep - 1], 0, 1)

    def predict(self, image):
        threshold = self.threshold_ if hasattr(self, "threshold_") else self.threshold
        return self._components(self.score_map(image), threshold)

    __call__ = predict

    def fit(self, samples, y=None):
        cands = self.candidates if self.candidates is not None else np.round(np.arange(0.02, 0.61, 0.02), 2)
        scores = []
        maps = [(self.score_map(s.image), s.masks) for s in samples]
        for t in cands:
            total = 0.0
            for score, gt in maps:
                total += dsb_map(self._components(score, t)[0], gt)
            scores.append(total / len(maps))
        self.fit_scores_ = np.array(scores)
        self.threshold_ = float(cands[int(np.argmax(scores))])
        return self

    def score(self, samples):
        return float(np.mean([dsb_map(self.predict(s.image)[0], s.masks) for s in samples]))


class ExternalPredictor:
    """Run an executable per image: it reads an image path on stdin and prints a mask directory.

    Every ``*.png`` in the printed directory is one instance (confidence 1).
    """

    def __init__(self, command, timeout=600):
        self.command = command
        self.timeout = timeout

    def __call__(self, image):
        image = check_image(image)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "image.png"
            write_image(path, image)
            proc = subprocess.run(self.command, input=f"{path}\n", capture_output=True, text=True,
                                  shell=isinstance(self.command, str), timeout=self.timeout)
            if proc.returncode != 0:
                raise RuntimeError(f"predictor {self.command!r} failed: {proc.stderr.strip()}")
            out_dir = Path(proc.stdout.strip().splitlines()[-1]) if proc.stdout.strip() else None
            if out_dir is None or not out_dir.is_dir():
                raise RuntimeError(f"predictor {self.command!r} did not print a mask directory")
            files = sorted(out_dir.glob("*.png"))
            masks = [read_mask(f) for f in files]
        if not masks:
            return np.zeros((0,) + image.shape[:2], bool), np.zeros(0)
        return np.stack(masks), np.ones(len(masks))


def make_predictor(spec, samples=None, **kwargs):
    """Resolve ``oracle``, ``empty``, ``blob`` or ``exec:<command>``."""
    if spec == "oracle":
        if samples is None:
            raise ValueError("oracle predictor needs labelled samples")
        return OraclePredictor(samples)
    if spec == "empty":
        return EmptyPredictor()
    if spec == "blob":
        return BlobPredictor(**kwargs)
    if spec.startswith("exec:"):
        return ExternalPredictor(spec[len("exec:"):])
    raise ValueError(f"unknown predictor {spec!r}")
