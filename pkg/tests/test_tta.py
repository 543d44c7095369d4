import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from nucleistyle.predictors import BlobPredictor
from nucleistyle.tta import PredictorContractError, Transform, TtaConfig, tta_predict

from conftest import disc


def as_set(masks):
    return sorted(m.tobytes() for m in masks)


def threshold_predictor(image):
    """Equivariant under any pixel permutation that preserves adjacency."""
    labels, n = ndimage.label(image[..., 0] > 0.5)
    masks = np.stack([labels == i for i in range(1, n + 1)]) if n else np.zeros((0,) + image.shape[:2], bool)
    return masks, np.full(n, 0.9)


def blob_image():
    img = np.zeros((24, 24, 3))
    for cy, cx, r in [(5, 6, 3), (15, 17, 4), (19, 5, 2)]:
        img[disc((24, 24), cy, cx, r)] = 1.0
    return img


def test_identity_config_matches_direct(small_corpus):
    pred = BlobPredictor()
    for s in small_corpus:
        direct, _ = pred(s.image)
        assert as_set(tta_predict(pred, s.image, TtaConfig.identity())) == as_set(direct)


def test_equivariant_predictor_unchanged():
    img = blob_image()
    direct, _ = threshold_predictor(img)
    cfg = TtaConfig(rot90=(0, 1, 2, 3), flips=("h", "v"))
    assert as_set(tta_predict(threshold_predictor, img, cfg)) == as_set(direct)


def test_blob_predictor_flip_equivariant(small_corpus):
    pred = BlobPredictor()
    cfg = TtaConfig(rot90=(0,), flips=("h", "v"))
    for s in small_corpus[:4]:
        assert as_set(tta_predict(pred, s.image, cfg)) == as_set(pred(s.image)[0])


def test_spurious_instance_voted_out():
    img = blob_image()
    calls = []

    def flaky(image):
        calls.append(1)
        masks, conf = threshold_predictor(image)
        if len(calls) == 2:
            extra = np.zeros((1,) + image.shape[:2], bool)
            extra[0, 10:12, 0:2] = True
            masks, conf = np.concatenate([masks, extra]), np.append(conf, 1.0)
        return masks, conf

    cfg = TtaConfig(rot90=(0, 1, 2, 3), flips=())
    assert len(cfg.transforms()) == 4
    out = tta_predict(flaky, img, cfg)
    assert len(calls) == 4
    assert as_set(out) == as_set(threshold_predictor(img)[0])


def test_contract_error_names_transform():
    def bad(image):
        return np.ones((1, 3, 4), bool), np.ones(1)

    with pytest.raises(PredictorContractError, match=r"rot90\(1\)"):
        tta_predict(bad, np.zeros((3, 4, 3)), TtaConfig(rot90=(1,), flips=()))


def test_contract_error_on_overlap():
    def overlapping(image):
        return np.ones((2,) + image.shape[:2], bool), np.ones(2)

    with pytest.raises(PredictorContractError, match="identity"):
        tta_predict(overlapping, np.zeros((4, 4, 3)), TtaConfig.identity())


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(bool, st.tuples(st.integers(1, 4), st.integers(2, 12), st.integers(2, 12))),
       st.sampled_from([Transform("rot90", 1), Transform("rot90", 2), Transform("rot90", 3),
                        Transform("flip", "h"), Transform("flip", "v")]))
def test_geometric_inverse_exact(masks, t):
    forward = np.stack([t.apply(m) for m in masks])
    assert np.array_equal(t.invert_masks(forward, masks.shape[1:]), masks)


@pytest.mark.parametrize("factor", [0.8, 1.25, 1.5])
def test_rescale_inverse_within_boundary_band(factor):
    shape = (40, 40)
    m = disc(shape, 20, 18, 9)
    t = Transform("scale", factor)
    scaled = t.apply(np.repeat(m[..., None], 3, axis=2).astype(float))[..., 0] > 0.5
    back = t.invert_masks(scaled[None], shape)[0]
    band = ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
    assert not np.any((back != m) & ~band)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_output_always_disjoint(seed):
    def noisy(image):
        rng = np.random.default_rng(int(image.sum() * 1000) % 2**32)
        labels, n = ndimage.label(rng.random(image.shape[:2]) > 0.6)
        masks = np.stack([labels == i for i in range(1, n + 1)]) if n else np.zeros((0,) + image.shape[:2], bool)
        return masks, rng.random(n)

    img = np.random.default_rng(seed).random((12, 12, 3))
    cfg = TtaConfig(rot90=(0, 1), flips=("h",), scales=(1.5,), jitter_draws=1, seed=seed)
    out = tta_predict(noisy, img, cfg)
    assert out.ndim == 3 and out.shape[1:] == (12, 12)
    if len(out):
        assert out.sum(axis=0).max() <= 1
        assert out.any(axis=(1, 2)).all()


@pytest.mark.parametrize("kw", [dict(flips=("x",)), dict(merge_iou_threshold=1.0),
                                dict(vote_fraction=0), dict(scales=(0,))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TtaConfig(**kw)
