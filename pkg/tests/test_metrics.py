import numpy as np
import pytest
from hypothesis import given, strategies as st

from nestfield.metrics import (
    argmax_pixel,
    binarize,
    iou,
    localization_hit,
    miou,
    recall_at_k,
    retrieval_hit,
    retrieval_rank,
)


def test_constant_map_ties_to_origin():
    assert argmax_pixel(np.ones((5, 5))) == (0, 0)
    assert localization_hit(np.ones((5, 5)), (0, 0, 0, 0))


def test_delta_outside_box():
    v = np.zeros((20, 20))
    v[10, 10] = 1
    assert not localization_hit(v, (0, 0, 5, 5))
    assert localization_hit(v, (10, 10, 12, 12))


def test_iou_examples():
    sq = np.zeros((14, 14), dtype=bool)
    sq[2:12, 2:12] = True
    assert iou(sq, sq) == 1.0
    a = np.zeros((20, 20), dtype=bool)
    b = np.zeros((20, 20), dtype=bool)
    a[:5, :5] = True
    b[10:15, 10:15] = True
    assert iou(a, b) == 0.0
    dilated = np.zeros_like(sq)
    dilated[1:13, 1:13] = True
    assert iou(dilated, sq) == pytest.approx(100 / 144)
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_miou_binarizes_relevancy():
    gt = np.zeros((4, 4), dtype=bool)
    gt[:2] = True
    rel = np.where(gt, 0.8, 0.3)
    assert miou(rel, gt) == 1.0
    # uncovered pixels (relevancy 0) never count as positive
    rel[3, 3] = 0.0
    assert not binarize(rel)[3, 3]


def test_binarize_constant_live_map():
    v = np.array([[0.0, 0.4], [0.4, 0.4]])
    assert binarize(v).tolist() == [[False, True], [True, True]]
    assert not binarize(np.zeros((2, 2))).any()


def test_rank_example():
    pool = [np.array([1, 0, 0], bool), np.array([0, 1, 0], bool), np.array([0, 0, 1], bool)]
    rel = np.array([0.9, 0.5, 0.1])
    assert retrieval_rank(rel, pool, 1) == 2
    assert retrieval_hit(rel, pool, 1, 2) and not retrieval_hit(rel, pool, 1, 1)
    assert retrieval_hit(rel, pool, 0, 1)


def test_rank_ties_by_segment_id():
    pool = [np.array([1, 0], bool), np.array([0, 1], bool)]
    assert retrieval_rank(np.array([0.5, 0.5]), pool, 1) == 2
    assert retrieval_rank(np.array([0.5, 0.5]), pool, 0) == 1


@given(st.lists(st.integers(1, 10), min_size=1, max_size=30))
def test_recall_monotone_in_k(ranks):
    vals = [recall_at_k(ranks, k) for k in range(1, 12)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_recall_empty():
    assert recall_at_k([], 3) == 0.0


@given(st.integers(0, 10_000))
def test_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 8, 8)) < 0.4
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@given(st.integers(0, 10_000))
def test_localization_invariant_under_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(size=(9, 9))
    box = tuple(int(x) for x in (*rng.integers(0, 5, 2), *rng.integers(4, 9, 2)))
    for g in (lambda x: 3 * x + 1, np.exp, lambda x: x ** 3):
        assert localization_hit(g(v), box) == localization_hit(v, box)
