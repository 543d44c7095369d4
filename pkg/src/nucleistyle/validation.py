"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


def check_image(image, name="image"):
    """Return ``image`` as a float64 ``(H, W, 3)`` array in [0, 1].

    Grayscale ``(H, W)`` or ``(H, W, 1)`` inputs are replicated across channels;
    an alpha channel is dropped.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"{name} must be HxW or HxWxC, got shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    elif img.shape[2] != 3:
        raise ValueError(f"{name} must have 1, 3 or 4 channels, got {img.shape[2]}")
    img = img.astype(np.float64, copy=False)
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def check_images(images, name="images"):
    """Stack a sequence of equally sized images to ``(N, H, W, 3)``."""
    if isinstance(images, np.ndarray) and images.ndim == 4:
        return np.stack([check_image(im, name) for im in images]) if len(images) else images
    images = [check_image(im, name) for im in images]
    if not images:
        raise ValueError(f"{name} is empty")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{name} must share one shape, got {sorted(shapes)}")
    return np.stack(images)


def check_masks(masks, shape=None, allow_empty_instances=False):
    """Return an ``(N, H, W)`` boolean stack of pairwise disjoint instance masks."""
    m = np.asarray(masks)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ValueError(f"masks must be NxHxW, got shape {m.shape}")
    if shape is not None and m.shape[1:] != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape[1:]} does not match image shape {tuple(shape[:2])}")
    m = m.astype(bool, copy=False)
    if len(m) and m.sum(axis=0).max() > 1:
        raise ValueError("instance masks overlap")
    if not allow_empty_instances and len(m) and not m.any(axis=(1, 2)).all():
        raise ValueError("instance masks must be non-empty")
    return m


def resolve_overlaps(masks, order=None):
    """Make masks disjoint; each contested pixel goes to the first instance in ``order``.

    Instances left empty are removed. Returns ``(masks, kept_indices)`` where
    ``kept_indices`` index into the input.
    """
    m = np.asarray(masks, dtype=bool)
    if len(m) == 0:
        return m.copy(), np.zeros(0, dtype=int)
    order = np.arange(len(m)) if order is None else np.asarray(order)
    taken = np.zeros(m.shape[1:], dtype=bool)
    out = np.zeros_like(m)
    overlapped = False
    for idx in order:
        own = m[idx] & ~taken
        overlapped |= bool((m[idx] & taken).any())
        out[idx] = own
        taken |= own
    if overlapped:
        logger.warning("overlapping instance pixels reassigned to the earlier instance")
    kept = np.array([i for i in range(len(m)) if out[i].any()], dtype=int)
    return out[kept], kept


def one_hot(domains, num_domains):
    domains = np.asarray(domains, dtype=int)
    if domains.size and (domains.min() < 0 or domains.max() >= num_domains):
        raise ValueError(f"domain ids must lie in [0, {num_domains})")
    out = np.zeros((domains.size, num_domains))
    out[np.arange(domains.size), domains.ravel()] = 1.0
    return out
