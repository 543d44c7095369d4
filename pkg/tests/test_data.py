import logging

import imageio.v3 as iio
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nucleistyle.data import (DomainStyle, LabeledSample, SynthCorpusConfig, disc_coverage,
                              generate_synth_corpus, imbalanced_subset, load_corpus, load_sample,
                              read_image, read_submission, render_layout, rle_decode, rle_encode,
                              sample_layout, write_corpus, write_submission)


def rle_oracle(mask):
    """Walk pixels in column-major order, one at a time."""
    h, w = mask.shape
    runs, start, length = [], None, 0
    pos = 0
    for c in range(w):
        for r in range(h):
            pos += 1
            if mask[r, c]:
                if start is None:
                    start, length = pos, 0
                length += 1
            elif start is not None:
                runs.append((start, length))
                start = None
    if start is not None:
        runs.append((start, length))
    return " ".join(f"{s} {n}" for s, n in runs)


class TestRle:
    def test_single_top_left_pixel(self):
        m = np.zeros((2, 2), bool)
        m[0, 0] = True
        assert rle_encode(m) == "1 1"

    def test_all_ones(self):
        assert rle_encode(np.ones((2, 2), bool)) == "1 4"

    def test_decode_single_pixel(self):
        m = rle_decode("1 1", 2, 2)
        assert m.tolist() == [[True, False], [False, False]]

    def test_column_major(self):
        m = np.zeros((2, 3), bool)
        m[1, 0] = m[0, 1] = True
        assert rle_encode(m) == "2 2"

    @pytest.mark.parametrize("bad", ["", "1", "a b", "1 5", "0 1", "3 2 4 1", "1 0"])
    def test_decode_rejects(self, bad):
        with pytest.raises(ValueError):
            rle_decode(bad, 2, 2)

    def test_encode_rejects_empty(self):
        with pytest.raises(ValueError):
            rle_encode(np.zeros((3, 3), bool))

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(bool, hnp.array_shapes(min_dims=2, max_dims=2, max_side=64)))
    def test_matches_scan_oracle(self, m):
        if not m.any():
            return
        assert rle_encode(m) == rle_oracle(m)
        assert np.array_equal(rle_decode(rle_encode(m), *m.shape), m)


def test_submission_roundtrip(tmp_path):
    a = np.zeros((0, 4, 5), bool)
    b = np.zeros((2, 4, 5), bool)
    b[0, 0, :2] = True
    b[1, 3, 4] = True
    write_submission(tmp_path / "s.csv", {"a": a, "b": b})
    text = (tmp_path / "s.csv").read_text()
    assert text == "ImageId,EncodedPixels\na,\nb,1 1 5 1\nb,20 1\n"
    back = read_submission(tmp_path / "s.csv", {"a": (4, 5), "b": (4, 5)})
    assert back["a"].shape == (0, 4, 5)
    assert np.array_equal(back["b"], b)


class TestLoading:
    def test_gray_8bit(self, tmp_path):
        raw = np.zeros((5, 6), np.uint8)
        raw[2, 3] = 255
        iio.imwrite(tmp_path / "x.png", raw)
        img = read_image(tmp_path / "x.png")
        assert img.shape == (5, 6, 3)
        assert img.max() == 1.0

    def test_16bit_uses_dtype_max(self, tmp_path):
        raw = np.full((4, 4), 1000, np.uint16)
        iio.imwrite(tmp_path / "x.png", raw)
        img = read_image(tmp_path / "x.png")
        assert np.allclose(img, 1000 / 65535)

    def test_alpha_dropped(self, tmp_path):
        raw = np.zeros((4, 4, 4), np.uint8)
        raw[..., 3] = 255
        iio.imwrite(tmp_path / "x.png", raw)
        assert read_image(tmp_path / "x.png").shape == (4, 4, 3)

    def test_unreadable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not an image")
        with pytest.raises(OSError):
            read_image(tmp_path / "x.png")

    def _layout(self, tmp_path, masks):
        (tmp_path / "s" / "images").mkdir(parents=True)
        (tmp_path / "s" / "masks").mkdir()
        iio.imwrite(tmp_path / "s" / "images" / "s.png", np.zeros((2, 2, 3), np.uint8))
        for name, m in masks.items():
            iio.imwrite(tmp_path / "s" / "masks" / name, m.astype(np.uint8) * 255)
        return tmp_path / "s" / "images" / "s.png", tmp_path / "s" / "masks"

    def test_three_masks(self, tmp_path):
        ms = {}
        for k in range(3):
            ms[f"m{k}.png"] = np.zeros((2, 2), bool)
            ms[f"m{k}.png"].flat[k] = True
        img, mdir = self._layout(tmp_path, ms)
        s = load_sample(img, mdir)
        assert s.masks.shape == (3, 2, 2)
        assert s.id == "s"

    def test_overlap_goes_to_first(self, tmp_path, caplog):
        a = np.array([[1, 1], [0, 0]], bool)
        b = np.array([[0, 1], [0, 1]], bool)
        img, mdir = self._layout(tmp_path, {"a.png": a, "b.png": b})
        with caplog.at_level(logging.WARNING):
            s = load_sample(img, mdir)
        assert "overlap" in caplog.text.lower()
        assert s.masks[0].tolist() == a.tolist()
        assert s.masks[1].tolist() == [[False, False], [False, True]]
        # exhaustive disjointness scan
        assert all(s.masks[:, r, c].sum() <= 1 for r in range(2) for c in range(2))

    def test_mask_shape_mismatch_names_file(self, tmp_path):
        img, mdir = self._layout(tmp_path, {"bad_one.png": np.ones((3, 3), bool)})
        with pytest.raises(ValueError, match="bad_one.png"):
            load_sample(img, mdir)


class TestSynth:
    def test_counts(self):
        samples = generate_synth_corpus(SynthCorpusConfig(num_domains=3, images_per_domain=50, seed=0))
        assert len(samples) == 150
        assert np.bincount([s.domain for s in samples]).tolist() == [50, 50, 50]

    def test_deterministic(self):
        cfg = dict(num_domains=2, images_per_domain=5, seed=4)
        a = generate_synth_corpus(SynthCorpusConfig(**cfg))
        b = generate_synth_corpus(SynthCorpusConfig(**cfg))
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.image.tobytes() == y.image.tobytes()
            assert x.masks.tobytes() == y.masks.tobytes()

    def test_seed_changes_pixels_not_ids(self):
        a = generate_synth_corpus(SynthCorpusConfig(num_domains=2, images_per_domain=3, seed=1))
        b = generate_synth_corpus(SynthCorpusConfig(num_domains=2, images_per_domain=3, seed=2))
        assert [s.id for s in a] == [s.id for s in b]
        assert all(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))

    def test_masks_disjoint_nonempty(self, small_corpus):
        for s in small_corpus:
            assert s.masks.sum(axis=0).max() <= 1
            assert s.masks.any(axis=(1, 2)).all()
            assert 0 <= s.image.min() and s.image.max() <= 1

    def test_masks_equal_noise_free_render(self):
        cfg = SynthCorpusConfig(num_domains=2, images_per_domain=1, seed=3)
        rng = np.random.default_rng(0)
        layout = sample_layout(rng, cfg)
        style = DomainStyle((0, 0, 0), (1, 1, 1), noise=0.0, blur=0.0)
        image, masks = render_layout(layout, style, cfg.image_size, None, cfg.supersample, noise=False)
        cover = disc_coverage(layout, cfg.image_size, cfg.supersample)
        # foreground intent of each disc = its >= 50% coverage pixels
        for k in range(len(masks)):
            assert np.array_equal(masks[k], cover[k] >= 0.5)
        # without noise/blur the image is exactly the coverage-weighted blend
        assert np.all(image[..., 0][masks.any(0)] > 0)

    def test_domains_share_layout_distribution(self):
        cfg = SynthCorpusConfig(num_domains=2, images_per_domain=200, seed=5)
        samples = generate_synth_corpus(cfg)
        counts = [[len(s.masks) for s in samples if s.domain == d] for d in (0, 1)]
        # two-sample comparison of nucleus counts: means within 4 standard errors
        se = np.sqrt(np.var(counts[0]) / 200 + np.var(counts[1]) / 200)
        assert abs(np.mean(counts[0]) - np.mean(counts[1])) < 4 * se

    @pytest.mark.parametrize("kw", [dict(num_domains=1), dict(image_size=16),
                                    dict(nuclei_count_range=(5, 2)), dict(nuclei_radius_range=(4, 3))])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SynthCorpusConfig(**kw)

    def test_crowded_request_is_reduced_and_recorded(self):
        cfg = SynthCorpusConfig(num_domains=2, images_per_domain=1, image_size=32,
                                nuclei_count_range=(40, 40), nuclei_radius_range=(6, 6), max_retries=20)
        samples = generate_synth_corpus(cfg)
        assert cfg.placement_records
        assert all(len(s.masks) < 40 for s in samples)


def test_corpus_roundtrip(tmp_path, small_corpus):
    write_corpus(tmp_path, small_corpus)
    back = load_corpus(tmp_path)
    assert [s.id for s in back] == sorted(s.id for s in small_corpus)
    by_id = {s.id: s for s in small_corpus}
    for s in back:
        ref = by_id[s.id]
        assert s.domain == ref.domain
        assert np.array_equal(s.masks, ref.masks)
        assert np.abs(s.image - ref.image).max() <= 0.5 / 255 + 1e-12


def test_labeled_sample_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        LabeledSample(np.zeros((4, 4, 3)), np.zeros((1, 5, 5), bool))


def test_imbalanced_subset(small_corpus):
    rng = np.random.default_rng(0)
    sub = imbalanced_subset(small_corpus, {0: 0.75, 1: 0.25}, 4, rng)
    assert sorted(s.domain for s in sub) == [0, 0, 0, 1]
