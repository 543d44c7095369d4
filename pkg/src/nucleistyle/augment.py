"""Mask-preserving style augmentation and joint image/mask geometric augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from skimage import color

from .data import LabeledSample
from .validation import check_masks

logger = logging.getLogger(__name__)

STANDARD_OPS = ("hflip", "vflip", "rot90k", "scale", "color_jitter")


@dataclass
class AugmentPolicy:
    style_prob: float = 0.5
    standard_ops: tuple = STANDARD_OPS
    seed: int = 0
    exclude_self_domain: bool = False
    scale_range: tuple = (0.8, 1.25)
    jitter: dict = field(default_factory=lambda: {"brightness": 0.2, "contrast": 0.2,
                                                  "saturation": 0.2, "hue": 0.05})

    def __post_init__(self):
        if not 0.0 <= self.style_prob <= 1.0:
            raise ValueError(f"style_prob must lie in [0, 1], got {self.style_prob}")
        unknown = set(self.standard_ops) - set(STANDARD_OPS)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        self.standard_ops = tuple(self.standard_ops)
        self.scale_range = tuple(self.scale_range)


# ---------------------------------------------------------------- style

def style_augment(model, sample: LabeledSample, rng, exclude_self_domain=False):
    """Re-render ``sample`` with a random attribute code and domain; masks are carried over.

    Returns ``(augmented_sample, drawn_domain)``. Images whose size differs from
    the model's are co-cropped (reflect-padded if smaller) with their masks first.
    """
    if not hasattr(model, "nets_"):
        raise ValueError("style model is not trained")
    size = model.config_.image_size
    sample = co_crop(sample, size)
    k = model.num_domains_
    choices = np.arange(k)
    if exclude_self_domain and sample.domain is not None:
        choices = choices[choices != sample.domain]
    domain = int(rng.choice(choices))
    z_a = rng.standard_normal((1, model.config_.attr_dim))
    content = model.encode_content(sample.image[None])
    image = np.clip(model.generate(content, z_a, [domain])[0], 0.0, 1.0)
    masks = None if sample.masks is None else sample.masks.copy()
    return LabeledSample(image, masks, domain, sample.id), domain


def co_crop(sample: LabeledSample, size):
    """Centre crop (reflect-pad first if needed) image and masks to ``size x size``."""
    h, w = sample.image.shape[:2]
    if (h, w) == (size, size):
        return sample
    ph, pw = max(0, size - h), max(0, size - w)
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    image = np.pad(sample.image, pads + ((0, 0),), mode="reflect") if (ph or pw) else sample.image
    masks = sample.masks
    if masks is not None and (ph or pw):
        masks = np.pad(masks, ((0, 0),) + pads)
    H, W = image.shape[:2]
    top, left = (H - size) // 2, (W - size) // 2
    image = image[top:top + size, left:left + size]
    if masks is not None:
        masks = masks[:, top:top + size, left:left + size]
        masks = masks[masks.any(axis=(1, 2))]
    return LabeledSample(image, masks, sample.domain, sample.id)


# ---------------------------------------------------------------- geometric / photometric

def _flip_image(image, axis):
    return np.ascontiguousarray(np.flip(image, axis=axis))


def _flip_masks(masks, axis):
    return np.ascontiguousarray(np.flip(masks, axis=axis + 1))


def rescale_image(image, factor, shape=None):
    """Bilinear rescale of an ``(H, W, C)`` image by ``factor`` (or to ``shape``)."""
    h, w = image.shape[:2]
    shape = shape or (max(1, int(round(h * factor))), max(1, int(round(w * factor))))
    zoom = (shape[0] / h, shape[1] / w, 1)
    out = ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[: shape[0], : shape[1]], 0, 1)


def rescale_masks(masks, shape):
    """Nearest-neighbour resampling of an ``(N, H, W)`` stack to ``shape``."""
    n, h, w = masks.shape
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(int), w - 1)
    return masks[:, rows][:, :, cols]


def center_fit(image, masks, shape):
    """Centre-crop, or edge-pad (image) / zero-pad (masks), a rescaled pair back to ``shape``."""
    H, W = shape
    h, w = image.shape[:2]
    if h > H or w > W:
        top, left = max(0, (h - H) // 2), max(0, (w - W) // 2)
        image = image[top:top + H, left:left + W]
        masks = masks[:, top:top + H, left:left + W]
        h, w = image.shape[:2]
    if h < H or w < W:
        pads = (((H - h) // 2, H - h - (H - h) // 2), ((W - w) // 2, W - w - (W - w) // 2))
        image = np.pad(image, pads + ((0, 0),), mode="edge")
        masks = np.pad(masks, ((0, 0),) + pads)
    return image, masks


def color_jitter(image, rng, brightness=0.2, contrast=0.2, saturation=0.2, hue=0.05):
    """Random brightness, contrast, saturation and hue changes; result clipped to [0, 1]."""
    img = image * rng.uniform(1 - brightness, 1 + brightness)
    mean = img.mean()
    img = (img - mean) * rng.uniform(1 - contrast, 1 + contrast) + mean
    img = np.clip(img, 0, 1)
    hsv = color.rgb2hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(1 - saturation, 1 + saturation), 0, 1)
    hsv[..., 0] = np.mod(hsv[..., 0] + rng.uniform(-hue, hue), 1.0)
    return np.clip(color.hsv2rgb(hsv), 0, 1)


def standard_augment(sample: LabeledSample, ops, rng, scale_range=(0.8, 1.25), jitter=None):
    """Apply each enabled op with probability 1/2 (rot90k: random multiple of 90 degrees).

    Geometric ops move image and masks together (nearest-neighbour for masks);
    colour jitter touches the image only. Instances that vanish under
    rescaling are dropped with a warning.
    """
    unknown = set(ops) - set(STANDARD_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    image = sample.image
    masks = sample.masks if sample.masks is not None else np.zeros((0,) + image.shape[:2], bool)
    if "hflip" in ops and rng.random() < 0.5:
        image, masks = _flip_image(image, 1), _flip_masks(masks, 1)
    if "vflip" in ops and rng.random() < 0.5:
        image, masks = _flip_image(image, 0), _flip_masks(masks, 0)
    if "rot90k" in ops:
        k = int(rng.integers(4))
        image = np.ascontiguousarray(np.rot90(image, k, axes=(0, 1)))
        masks = np.ascontiguousarray(np.rot90(masks, k, axes=(1, 2)))
    if "scale" in ops and rng.random() < 0.5:
        factor = rng.uniform(*scale_range)
        shape = image.shape[:2]
        scaled = rescale_image(image, factor)
        scaled_masks = rescale_masks(masks, scaled.shape[:2])
        image, masks = center_fit(scaled, scaled_masks, shape)
        keep = masks.any(axis=(1, 2))
        if not keep.all():
            logger.warning("%s: %d instance(s) vanished under rescaling", sample.id, int((~keep).sum()))
        masks = masks[keep]
    if "color_jitter" in ops and rng.random() < 0.5:
        image = color_jitter(image, rng, **(jitter or {}))
    out_masks = None if sample.masks is None else check_masks(masks, image.shape)
    return LabeledSample(image, out_masks, sample.domain, sample.id)


def flip(sample: LabeledSample, axis):
    """Deterministic flip of image and masks (``axis`` 1 = horizontal, 0 = vertical)."""
    masks = None if sample.masks is None else _flip_masks(sample.masks, axis)
    return LabeledSample(_flip_image(sample.image, axis), masks, sample.domain, sample.id)


def rot90(sample: LabeledSample, k=1):
    masks = None if sample.masks is None else np.ascontiguousarray(np.rot90(sample.masks, k, axes=(1, 2)))
    return LabeledSample(np.ascontiguousarray(np.rot90(sample.image, k, axes=(0, 1))), masks,
                         sample.domain, sample.id)


# ---------------------------------------------------------------- policy

@dataclass
class AugmentRecord:
    sample_id: str
    source_id: str
    styled: bool
    domain_drawn: int | None
    seed: int


def apply_policy(model, batch, policy: AugmentPolicy, rng=None):
    """Style-augment each sample with probability ``style_prob``, then standard-augment all.

    Returns ``(augmented_samples, records)``.
    """
    rng = np.random.default_rng(policy.seed) if rng is None else rng
    out, records = [], []
    for sample in batch:
        seed = int(rng.integers(2**63))
        local = np.random.default_rng(seed)
        styled = local.random() < policy.style_prob
        drawn = None
        if styled:
            sample, drawn = style_augment(model, sample, local, policy.exclude_self_domain)
        sample = standard_augment(sample, policy.standard_ops, local, policy.scale_range, policy.jitter)
        out.append(sample)
        records.append(AugmentRecord(sample.id, sample.id, styled, drawn, seed))
    return out, records


class StyleAugmenter(BaseEstimator, TransformerMixin):
    """Sklearn-style wrapper: ``transform`` maps a list of samples to an augmented list.

    Randomness is drawn from ``seed`` once per ``transform`` call, so two
    augmenters with equal parameters produce equal epochs.
    """

    def __init__(self, model=None, style_prob=0.5, standard_ops=STANDARD_OPS, seed=0,
                 exclude_self_domain=False):
        self.model = model
        self.style_prob = style_prob
        self.standard_ops = standard_ops
        self.seed = seed
        self.exclude_self_domain = exclude_self_domain

    def fit(self, X=None, y=None):
        self.policy_ = AugmentPolicy(self.style_prob, tuple(self.standard_ops), self.seed,
                                     self.exclude_self_domain)
        if self.style_prob > 0 and self.model is None:
            raise ValueError("style_prob > 0 needs a trained style model")
        return self

    def transform(self, X):
        if not hasattr(self, "policy_"):
            self.fit()
        samples, self.records_ = apply_policy(self.model, X, self.policy_)
        return samples


__all__ = ["AugmentPolicy", "StyleAugmenter", "apply_policy", "standard_augment", "style_augment",
           "color_jitter", "rescale_image", "rescale_masks", "flip", "rot90", "co_crop"]
