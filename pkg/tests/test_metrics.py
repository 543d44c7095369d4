import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleistyle.data import LabeledSample
from nucleistyle.metrics import THRESHOLDS, dsb_map, iou, iou_matrix, score_corpus
from nucleistyle.predictors import EmptyPredictor, OraclePredictor


def optimal_map(pred, gt):
    """Exhaustive best one-to-one assignment per threshold."""
    n_p, n_g = len(pred), len(gt)
    ious = np.array([[iou(p, g) for g in gt] for p in pred]).reshape(n_p, n_g)
    scores = []
    for t in THRESHOLDS:
        best = 0
        if n_p and n_g:
            for perm in itertools.permutations(range(n_g), min(n_p, n_g)) if n_p <= n_g else \
                    itertools.permutations(range(n_p), n_g):
                pairs = zip(range(n_p), perm) if n_p <= n_g else zip(perm, range(n_g))
                best = max(best, sum(ious[i, j] > t for i, j in pairs))
        denom = n_p + n_g - best
        scores.append(1.0 if denom == 0 else best / denom)
    return float(np.mean(scores))


def instances(label_image):
    ids = [i for i in np.unique(label_image) if i]
    if not ids:
        return np.zeros((0,) + label_image.shape, bool)
    return np.stack([label_image == i for i in ids])


@st.composite
def label_images(draw, n_max=4, size=6):
    cells = draw(st.lists(st.integers(0, n_max), min_size=size * size, max_size=size * size))
    return np.array(cells).reshape(size, size)


def test_iou_fixture():
    a = np.array([[1, 1], [0, 0]], bool)
    b = np.array([[1, 0], [1, 0]], bool)
    assert iou(a, b) == 1 / 3


def test_iou_basics():
    m = np.eye(3, dtype=bool)
    assert iou(m, m) == 1.0
    assert iou(m, ~m) == 0.0
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((3, 2)))


def test_map_single_instance_iou_06():
    gt = np.zeros((1, 1, 5), bool)
    gt[0, 0, :] = True
    pred = np.zeros((1, 1, 5), bool)
    pred[0, 0, :3] = True
    assert iou(pred[0], gt[0]) == 0.6
    assert dsb_map(pred, gt) == pytest.approx(0.2, abs=1e-15)


def test_map_trivial_cases():
    gt = instances(np.array([[1, 1, 0], [0, 2, 2]]))
    assert dsb_map(gt, gt) == 1.0
    assert dsb_map(np.zeros((0, 2, 3), bool), gt) == 0.0
    assert dsb_map(gt, np.zeros((0, 2, 3), bool)) == 0.0
    with pytest.raises(ValueError):
        dsb_map(gt, np.zeros((1, 3, 3), bool))


@settings(max_examples=300, deadline=None)
@given(label_images(), label_images())
def test_map_matches_exhaustive_matcher(a, b):
    pred, gt = instances(a), instances(b)
    if len(pred) == 0 and len(gt) == 0:
        return
    assert dsb_map(pred, gt) == optimal_map(pred, gt)


@settings(max_examples=100, deadline=None)
@given(label_images(), label_images(), st.randoms())
def test_map_permutation_invariant(a, b, rnd):
    pred, gt = instances(a), instances(b)
    p_idx, g_idx = list(range(len(pred))), list(range(len(gt)))
    rnd.shuffle(p_idx)
    rnd.shuffle(g_idx)
    assert dsb_map(pred[p_idx], gt[g_idx]) == dsb_map(pred, gt)


def test_iou_matrix_matches_pairwise():
    a = instances(np.random.default_rng(0).integers(0, 4, (8, 8)))
    b = instances(np.random.default_rng(1).integers(0, 4, (8, 8)))
    ref = np.array([[iou(p, g) for g in b] for p in a])
    assert np.allclose(iou_matrix(a, b), ref, atol=0, rtol=0)


def test_score_corpus(tmp_path, small_corpus):
    rows, mean = score_corpus(OraclePredictor(small_corpus), small_corpus, report_path=tmp_path / "r.csv")
    assert mean == 1.0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sample_id,map,num_pred,num_gt"
    assert len(lines) == len(small_corpus) + 1
    _, mean = score_corpus(EmptyPredictor(), small_corpus)
    assert mean == 0.0


def test_score_corpus_missing_truth_lists_ids():
    s = [LabeledSample(np.zeros((4, 4, 3)), None, id="nogt")]
    with pytest.raises(ValueError, match="nogt"):
        score_corpus(EmptyPredictor(), s)
