import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drtanet.metrics import MetricAccumulator, binarize, confusion, prf1


@pytest.mark.parametrize(
    "tp, fp, fn, p, r, f",
    [
        (3, 1, 1, 0.75, 0.75, 0.75),
        (1, 1, 0, 0.5, 1.0, 2 / 3),
        (2, 0, 6, 1.0, 0.25, 0.4),
        (5, 5, 15, 0.5, 0.25, 1 / 3),
        (10, 0, 0, 1.0, 1.0, 1.0),
    ],
)
def test_hand_evaluated_cases(tp, fp, fn, p, r, f):
    rep = prf1(tp, fp, fn)
    assert rep.precision == p
    assert rep.recall == r
    assert rep.f1 == pytest.approx(f, abs=1e-15)


def test_perfect_prediction_scores_one(small_pairs):
    acc = MetricAccumulator()
    for pair in small_pairs:
        acc.update(pair.mask, pair.mask)
    for rep in (acc.aggregate(), acc.per_image_mean()):
        assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)


def test_zero_denominators_are_flagged():
    rep = prf1(0, 0, 4)
    assert rep.precision == 0.0 and rep.precision_degenerate
    assert rep.f1 == 0.0 and not rep.recall_degenerate
    empty = prf1(0, 0, 0)
    assert empty.recall_degenerate and "undefined" in empty.format()


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        prf1(-1, 0, 0)


def test_confusion_counts():
    pred = np.array([[1, 1, 0], [0, 1, 0]])
    truth = np.array([[1, 0, 0], [1, 1, 0]])
    assert confusion(pred, truth) == (2, 1, 1)
    with pytest.raises(ValueError, match="not binary"):
        confusion(pred * 2, truth)
    with pytest.raises(ValueError, match="shape"):
        confusion(pred, truth[:1])


def test_binarize_threshold_on_probability():
    logits = np.array([-1.0, 0.0, 1e-9, 3.0])
    np.testing.assert_array_equal(binarize(logits), [0, 0, 1, 1])
    np.testing.assert_array_equal(binarize(logits, threshold=0.9), [0, 0, 0, 1])


def test_aggregate_differs_from_per_image_mean():
    acc = MetricAccumulator()
    acc.extend([(1, 0, 0), (0, 0, 9)])
    assert acc.aggregate().f1 == pytest.approx(2 / 11)
    assert acc.per_image_mean().f1 == pytest.approx(0.5)


masks = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n), st.lists(st.integers(0, 1), min_size=n, max_size=n))
)


@given(masks)
def test_counts_partition_the_pixels(pair):
    pred, truth = (np.array(m) for m in pair)
    tp, fp, fn = confusion(pred, truth)
    tn = int(np.sum((pred == 0) & (truth == 0)))
    assert tp + fp + fn + tn == pred.size


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_f1_is_harmonic_mean_and_bounded(tp, fp, fn):
    rep = prf1(tp, fp, fn)
    assert 0.0 <= rep.f1 <= 1.0
    assert min(rep.precision, rep.recall) - 1e-12 <= rep.f1 <= max(rep.precision, rep.recall) + 1e-12
    if tp:
        assert rep.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))


@given(masks)
def test_f1_symmetric_in_prediction_and_truth(pair):
    pred, truth = (np.array(m) for m in pair)
    a = prf1(*confusion(pred, truth))
    b = prf1(*confusion(truth, pred))
    assert a.f1 == pytest.approx(b.f1)
    assert a.precision == pytest.approx(b.recall)
