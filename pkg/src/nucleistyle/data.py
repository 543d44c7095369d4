"""Samples, DSB-layout I/O, run-length encoding and the synthetic multi-modality corpus."""
from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import imageio.v3 as iio
import numpy as np
from scipy import ndimage

from .validation import check_image, check_masks, resolve_overlaps

logger = logging.getLogger(__name__)


@dataclass
class LabeledSample:
    image: np.ndarray
    masks: Optional[np.ndarray] = None
    domain: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        self.image = check_image(self.image)
        if self.masks is not None:
            self.masks = check_masks(self.masks, self.image.shape)


# ---------------------------------------------------------------- image I/O

def read_image(path):
    """Read an 8- or 16-bit raster as float ``(H, W, 3)`` in [0, 1]."""
    path = Path(path)
    try:
        raw = iio.imread(path)
    except Exception as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if raw.dtype == np.uint8:
        img = raw / 255.0
    elif raw.dtype == np.uint16:
        # dtype maximum, not per-image maximum: keeps brightness comparable across images
        img = raw / 65535.0
    elif raw.dtype == bool:
        img = raw.astype(np.float64)
    else:
        raise OSError(f"unsupported pixel type {raw.dtype} in {path}")
    return check_image(img, str(path))


def to_uint8(image):
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_image(path, image):
    iio.imwrite(path, to_uint8(image))


def read_mask(path):
    raw = iio.imread(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    return raw > 0


def load_sample(image_path, masks_dir=None, domain=None):
    """Load one image and, optionally, its per-nucleus mask files.

    Overlapping mask pixels stay with the earlier file in sorted filename order.
    """
    image_path = Path(image_path)
    image = read_image(image_path)
    masks = None
    if masks_dir is not None:
        files = sorted(Path(masks_dir).glob("*.png"))
        stack = []
        for f in files:
            m = read_mask(f)
            if m.shape != image.shape[:2]:
                raise ValueError(f"mask {f.name} has shape {m.shape}, image has {image.shape[:2]}")
            stack.append(m)
        if stack:
            masks, _ = resolve_overlaps(np.stack(stack))
        else:
            masks = np.zeros((0,) + image.shape[:2], dtype=bool)
    return LabeledSample(image=image, masks=masks, domain=domain, id=image_path.stem)


def read_domains_csv(path):
    with open(path, newline="") as fh:
        return {row["sample_id"]: int(row["domain"]) for row in csv.DictReader(fh)}


def load_corpus(root, with_masks=True, domains_csv=None):
    """Load every ``<root>/<id>/images/<id>.png`` sample, sorted by id.

    Domain labels come from ``domains_csv`` (default ``<root>/domains.csv`` if present).
    """
    root = Path(root)
    if domains_csv is None and (root / "domains.csv").exists():
        domains_csv = root / "domains.csv"
    labels = read_domains_csv(domains_csv) if domains_csv else {}
    samples = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        img = d / "images" / f"{d.name}.png"
        if not img.exists():
            continue
        mdir = d / "masks" if with_masks and (d / "masks").is_dir() else None
        samples.append(load_sample(img, mdir, labels.get(d.name)))
    return samples


def write_sample(root, sample: LabeledSample):
    base = Path(root) / sample.id
    (base / "images").mkdir(parents=True, exist_ok=True)
    write_image(base / "images" / f"{sample.id}.png", sample.image)
    if sample.masks is not None:
        (base / "masks").mkdir(exist_ok=True)
        for k, m in enumerate(sample.masks):
            iio.imwrite(base / "masks" / f"{sample.id}_{k:03d}.png", m.astype(np.uint8) * 255)


def write_corpus(root, samples, domains_csv=True):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(root, s)
    if domains_csv:
        with open(root / "domains.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "domain"])
            for s in samples:
                w.writerow([s.id, "" if s.domain is None else s.domain])


# ---------------------------------------------------------------- RLE

def rle_encode(mask):
    """Column-major, 1-indexed ``start length`` pairs of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    if not mask.any():
        raise ValueError("cannot encode an empty mask")
    flat = np.concatenate([[0], mask.T.ravel().astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return " ".join(f"{s + 1} {e - s}" for s, e in zip(starts, ends))


def rle_decode(rle, height, width):
    """Inverse of :func:`rle_encode`."""
    tokens = rle.split()
    if not tokens or len(tokens) % 2:
        raise ValueError(f"malformed run-length string {rle!r}")
    try:
        nums = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"malformed run-length string {rle!r}") from exc
    starts, lengths = nums[0::2] - 1, nums[1::2]
    total = height * width
    flat = np.zeros(total, dtype=bool)
    prev_end = 0
    for s, n in zip(starts, lengths):
        if n < 1 or s < 0 or s + n > total:
            raise ValueError(f"run ({s + 1}, {n}) outside 1..{total}")
        if s < prev_end:
            raise ValueError(f"run ({s + 1}, {n}) overlaps or is out of order")
        flat[s:s + n] = True
        prev_end = s + n
    return flat.reshape(width, height).T


def write_submission(path, predictions):
    """Write a competition CSV from ``{image_id: masks}``; images without instances get an empty row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ImageId", "EncodedPixels"])
        for image_id, masks in predictions.items():
            masks = [m for m in np.asarray(masks, dtype=bool) if m.any()]
            if not masks:
                w.writerow([image_id, ""])
            for m in masks:
                w.writerow([image_id, rle_encode(m)])


def read_submission(path, shapes):
    """Parse a competition CSV back into ``{image_id: masks}`` given ``{image_id: (H, W)}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            h, w = shapes[row["ImageId"]]
            lst = out.setdefault(row["ImageId"], [])
            if row["EncodedPixels"]:
                lst.append(rle_decode(row["EncodedPixels"], h, w))
    return {k: (np.stack(v) if v else np.zeros((0,) + tuple(shapes[k]), bool)) for k, v in out.items()}


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class DomainStyle:
    background: tuple
    foreground: tuple
    noise: float = 0.02
    blur: float = 0.6


# Two fluorescence-like and four bright-field-like appearances.
DEFAULT_STYLES = (
    DomainStyle((0.03, 0.03, 0.04), (0.85, 0.85, 0.90), noise=0.02, blur=0.8),
    DomainStyle((0.93, 0.82, 0.88), (0.45, 0.18, 0.55), noise=0.02, blur=0.6),
    DomainStyle((0.02, 0.05, 0.02), (0.20, 0.80, 0.25), noise=0.02, blur=0.8),
    DomainStyle((0.78, 0.78, 0.76), (0.30, 0.30, 0.32), noise=0.03, blur=0.6),
    DomainStyle((0.70, 0.50, 0.72), (0.28, 0.08, 0.35), noise=0.02, blur=0.5),
    DomainStyle((0.90, 0.84, 0.58), (0.50, 0.33, 0.18), noise=0.02, blur=0.7),
)


@dataclass
class SynthCorpusConfig:
    num_domains: int = 6
    images_per_domain: int = 50
    image_size: int = 64
    nuclei_count_range: tuple = (3, 9)
    nuclei_radius_range: tuple = (3.0, 7.0)
    styles: Optional[list] = None
    seed: int = 0
    max_retries: int = 200
    domain_weights: Optional[list] = None
    supersample: int = 4
    placement_records: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.nuclei_count_range = tuple(self.nuclei_count_range)
        self.nuclei_radius_range = tuple(self.nuclei_radius_range)
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        lo, hi = self.nuclei_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"empty nuclei_count_range {self.nuclei_count_range}")
        rlo, rhi = self.nuclei_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"empty nuclei_radius_range {self.nuclei_radius_range}")
        if self.styles is not None:
            self.styles = [s if isinstance(s, DomainStyle) else DomainStyle(**s) for s in self.styles]
            if len(self.styles) < self.num_domains:
                raise ValueError("fewer styles than domains")

    def domain_styles(self):
        if self.styles is not None:
            return list(self.styles[: self.num_domains])
        styles = list(DEFAULT_STYLES[: self.num_domains])
        rng = np.random.default_rng([self.seed, 7919])
        while len(styles) < self.num_domains:
            bg, fg = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
            styles.append(DomainStyle(tuple(bg), tuple(fg), float(rng.uniform(0.01, 0.04)),
                                      float(rng.uniform(0.4, 1.0))))
        return styles


@dataclass
class NucleusLayout:
    centers: np.ndarray      # (n, 2) row, col
    radii: np.ndarray        # (n,)
    intensity: np.ndarray    # (n,) foreground weight in (0, 1]
    requested: int


def sample_layout(rng, cfg: SynthCorpusConfig):
    """Random non-touching discs; the count shrinks if placement keeps failing."""
    size = cfg.image_size
    lo, hi = cfg.nuclei_count_range
    requested = int(rng.integers(lo, hi + 1))
    centers, radii = [], []
    for _ in range(requested):
        for _attempt in range(cfg.max_retries):
            r = rng.uniform(*cfg.nuclei_radius_range)
            c = rng.uniform(r, size - r, size=2)
            if all(np.hypot(*(c - c2)) >= r + r2 + 1.5 for c2, r2 in zip(centers, radii)):
                centers.append(c)
                radii.append(r)
                break
    intensity = rng.uniform(0.8, 1.0, size=len(radii))
    return NucleusLayout(np.array(centers).reshape(-1, 2), np.array(radii), intensity, requested)


def disc_coverage(layout: NucleusLayout, size, supersample=4):
    """Per-nucleus fractional pixel coverage, ``(n, size, size)``, by supersampling."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    sub = (np.arange(size)[:, None] + offs[None, :]).ravel()
    cov = np.zeros((len(layout.radii), size, size))
    for k, ((cy, cx), r) in enumerate(zip(layout.centers, layout.radii)):
        inside = ((sub[:, None] - cy) ** 2 + (sub[None, :] - cx) ** 2) <= r * r
        cov[k] = inside.reshape(size, s, size, s).mean(axis=(1, 3))
    return cov


def render_layout(layout: NucleusLayout, style: DomainStyle, size, rng=None, supersample=4,
                  noise=True):
    """Render ``(image, masks)``; masks are pixels with at least 50% disc coverage."""
    cov = disc_coverage(layout, size, supersample)
    masks = cov >= 0.5
    alpha = (cov * layout.intensity[:, None, None]).sum(axis=0) if len(cov) else np.zeros((size, size))
    bg = np.asarray(style.background, dtype=float)
    fg = np.asarray(style.foreground, dtype=float)
    image = bg[None, None, :] * (1 - alpha[..., None]) + fg[None, None, :] * alpha[..., None]
    if noise:
        if style.blur > 0:
            image = ndimage.gaussian_filter(image, sigma=(style.blur, style.blur, 0), mode="reflect")
        if style.noise > 0:
            image = image + rng.normal(0, style.noise, size=image.shape)
    image = np.clip(image, 0, 1)
    keep = masks.any(axis=(1, 2))
    return image, masks[keep]


def _sample_id(index):
    # independent of the seed so reruns with another seed keep the same tree
    return hashlib.sha1(f"synth-{index}".encode()).hexdigest()[:16]


def generate_synth_corpus(cfg: SynthCorpusConfig):
    """Deterministic list of :class:`LabeledSample`, ``images_per_domain`` per domain.

    Layout (content) and rendering noise come from independent per-sample streams;
    domains differ only through their :class:`DomainStyle`.
    """
    styles = cfg.domain_styles()
    total = cfg.num_domains * cfg.images_per_domain
    children = np.random.SeedSequence(cfg.seed).spawn(total)
    samples = []
    cfg.placement_records.clear()
    for n, child in enumerate(children):
        domain = n // cfg.images_per_domain
        layout_seq, noise_seq = child.spawn(2)
        layout = sample_layout(np.random.default_rng(layout_seq), cfg)
        if len(layout.radii) < layout.requested:
            cfg.placement_records.append((n, layout.requested, len(layout.radii)))
            logger.info("sample %d: placed %d of %d nuclei", n, len(layout.radii), layout.requested)
        image, masks = render_layout(layout, styles[domain], cfg.image_size,
                                     np.random.default_rng(noise_seq), cfg.supersample)
        samples.append(LabeledSample(image, masks, domain, _sample_id(n)))
    return samples


def imbalanced_subset(samples, fractions, total, rng):
    """Draw ``total`` samples whose domain mix follows ``fractions`` (e.g. ``{0: .75, 1: .25}``)."""
    by_domain = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    out = []
    for d, frac in fractions.items():
        n = int(round(frac * total))
        pool = by_domain[d]
        if n > len(pool):
            warnings.warn(f"domain {d}: only {len(pool)} samples for {n} requested")
            n = len(pool)
        out.extend(pool[i] for i in rng.choice(len(pool), n, replace=False))
    return out
