"""Test-time augmentation: predict on transformed copies, map back, vote per instance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import color_jitter, rescale_image, rescale_masks
from .validation import check_image


class PredictorContractError(ValueError):
    pass


@dataclass
class TtaConfig:
    rot90: tuple = (0, 1, 2, 3)
    flips: tuple = ("h", "v")
    scales: tuple = ()
    jitter_draws: int = 0
    merge_iou_threshold: float = 0.5
    vote_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.rot90 = tuple(int(k) % 4 for k in self.rot90)
        self.flips = tuple(self.flips)
        self.scales = tuple(float(s) for s in self.scales)
        if set(self.flips) - {"h", "v"}:
            raise ValueError(f"flips must be drawn from 'h', 'v', got {self.flips}")
        if not 0 < self.merge_iou_threshold < 1:
            raise ValueError("merge_iou_threshold must lie in (0, 1)")
        if not 0 < self.vote_fraction <= 1:
            raise ValueError("vote_fraction must lie in (0, 1]")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")

    @classmethod
    def identity(cls):
        return cls(rot90=(0,), flips=(), scales=(), jitter_draws=0)

    def transforms(self):
        out = [Transform("identity")]
        out += [Transform("rot90", k) for k in sorted(set(self.rot90)) if k]
        out += [Transform("flip", f) for f in self.flips]
        out += [Transform("scale", s) for s in self.scales if s != 1.0]
        rng = np.random.default_rng(self.seed)
        out += [Transform("jitter", int(rng.integers(2**63))) for _ in range(self.jitter_draws)]
        return out


@dataclass(frozen=True)
class Transform:
    kind: str
    arg: object = None

    def __str__(self):
        return self.kind if self.arg is None else f"{self.kind}({self.arg})"

    def apply(self, image):
        if self.kind == "identity":
            return image
        if self.kind == "rot90":
            return np.ascontiguousarray(np.rot90(image, self.arg, axes=(0, 1)))
        if self.kind == "flip":
            return np.ascontiguousarray(np.flip(image, axis=1 if self.arg == "h" else 0))
        if self.kind == "scale":
            return rescale_image(image, self.arg)
        if self.kind == "jitter":
            return color_jitter(image, np.random.default_rng(self.arg))
        raise ValueError(f"unknown transform {self.kind}")

    def invert_masks(self, masks, shape):
        """Map ``(N, h, w)`` masks predicted on the transformed image back to ``shape``."""
        if self.kind in ("identity", "jitter"):
            return masks
        if self.kind == "rot90":
            return np.ascontiguousarray(np.rot90(masks, -self.arg, axes=(1, 2)))
        if self.kind == "flip":
            return np.ascontiguousarray(np.flip(masks, axis=2 if self.arg == "h" else 1))
        if self.kind == "scale":
            return rescale_masks(masks, shape[:2])
        raise ValueError(f"unknown transform {self.kind}")


def _call_predictor(predictor, image, transform):
    out = predictor(image)
    if isinstance(out, tuple):
        masks, conf = out
    else:
        masks, conf = out, None
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3 or (len(masks) and masks.shape[1:] != image.shape[:2]):
        raise PredictorContractError(f"predictor under {transform}: masks of shape {masks.shape} "
                                     f"for image {image.shape[:2]}")
    masks = masks.astype(bool)
    if len(masks) and masks.sum(axis=0).max() > 1:
        raise PredictorContractError(f"predictor under {transform}: overlapping instances")
    conf = np.ones(len(masks)) if conf is None else np.asarray(conf, dtype=float).reshape(-1)
    if len(conf) != len(masks) or np.any((conf < 0) | (conf > 1)):
        raise PredictorContractError(f"predictor under {transform}: confidences must be one per "
                                     f"instance in [0, 1]")
    return masks, conf


def tta_predict(predictor, image, config: TtaConfig, return_confidence=False):
    """Aggregate ``predictor`` over the transforms of ``config``.

    Back-mapped instances are clustered greedily (highest confidence first) by
    IoU >= ``merge_iou_threshold``, at most one member per run. A cluster
    survives if it was seen in at least ``vote_fraction`` of the runs; its mask
    keeps pixels present in at least ``vote_fraction`` of its members. Overlaps
    are resolved in favour of the more confident cluster.
    """
    image = check_image(image)
    shape = image.shape[:2]
    transforms = config.transforms()
    masks_all, conf_all, run_all = [], [], []
    for r, t in enumerate(transforms):
        masks, conf = _call_predictor(predictor, t.apply(image), t)
        back = t.invert_masks(masks, shape)
        keep = back.any(axis=(1, 2)) if len(back) else np.zeros(0, bool)
        masks_all.append(back[keep])
        conf_all.append(conf[keep])
        run_all.append(np.full(int(keep.sum()), r))
    n_runs = len(transforms)
    masks = np.concatenate(masks_all) if masks_all else np.zeros((0,) + shape, bool)
    conf = np.concatenate(conf_all)
    runs = np.concatenate(run_all)
    if len(masks) == 0:
        empty = np.zeros((0,) + shape, bool)
        return (empty, np.zeros(0)) if return_confidence else empty

    ious = _pairwise_iou(masks)
    order = np.argsort(-conf, kind="stable")
    assigned = np.zeros(len(masks), bool)
    clusters = []
    for seed in order:
        if assigned[seed]:
            continue
        members = [seed]
        assigned[seed] = True
        for r in range(n_runs):
            if r == runs[seed]:
                continue
            cand = np.flatnonzero((runs == r) & ~assigned)
            if len(cand) == 0:
                continue
            best = cand[np.argmax(ious[seed, cand])]
            if ious[seed, best] >= config.merge_iou_threshold:
                members.append(best)
                assigned[best] = True
        clusters.append(members)

    out, out_conf = [], []
    for members in clusters:
        if len(members) < config.vote_fraction * n_runs:
            continue
        votes = masks[members].sum(axis=0)
        mask = votes >= config.vote_fraction * len(members)
        if mask.any():
            out.append(mask)
            out_conf.append(float(conf[members].mean()))
    result, result_conf = _disjoint_by_confidence(out, out_conf, shape)
    return (result, result_conf) if return_confidence else result


def _pairwise_iou(masks):
    # masks from different runs may overlap, so no contingency-table shortcut
    flat = masks.reshape(len(masks), -1).astype(np.float64)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _disjoint_by_confidence(masks, conf, shape):
    if not masks:
        return np.zeros((0,) + shape, bool), np.zeros(0)
    order = np.argsort(-np.asarray(conf), kind="stable")
    taken = np.zeros(shape, bool)
    out, out_conf = [], []
    for i in order:
        m = masks[i] & ~taken
        if m.any():
            out.append(m)
            out_conf.append(conf[i])
            taken |= m
    if not out:
        return np.zeros((0,) + shape, bool), np.zeros(0)
    return np.stack(out), np.asarray(out_conf)


__all__ = ["TtaConfig", "Transform", "tta_predict", "PredictorContractError"]
