import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oodfl.metrics import auroc, fpr_at_tpr, top1_accuracy


def pairwise_auroc(id_s, ood_s):
    """O(n*m) count of correctly ordered (id, ood) pairs, ties worth one half."""
    wins = 0.0
    for a in id_s:
        for b in ood_s:
            wins += 1.0 if a > b else (0.5 if a == b else 0.0)
    return wins / (len(id_s) * len(ood_s))


def scan_fpr(id_s, ood_s, target=0.95):
    """Try every observed score as a threshold; keep the highest one meeting the TPR target."""
    best = -np.inf
    for t in sorted(set(id_s) | set(ood_s)):
        if np.mean(np.asarray(id_s) >= t) >= target:
            best = t
    return float(np.mean(np.asarray(ood_s) >= best))


def fixture(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 40, size=2)
    if seed % 2:  # integer scores force many ties
        return rng.integers(0, 6, n).astype(float), rng.integers(0, 6, m).astype(float)
    return rng.normal(0.5, 1.0, n), rng.normal(0.0, 1.0, m)


def test_accuracy_examples():
    assert top1_accuracy([0, 1, 2], [0, 1, 1]) == pytest.approx(2 / 3)
    assert top1_accuracy([3], [3]) == 1.0
    with pytest.raises(ValueError):
        top1_accuracy([], [])
    with pytest.raises(ValueError):
        top1_accuracy([0, 1], [0])


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.1, 0.2], [0.9, 0.8]) == 0.0
    assert auroc([0.5, 0.5], [0.5]) == 0.5
    assert auroc([3.0, 1.0], [2.0]) == 0.5
    with pytest.raises(ValueError):
        auroc([], [1.0])


def test_fpr_examples():
    assert fpr_at_tpr([0.9, 0.8], [0.1, 0.2]) == 0.0
    assert fpr_at_tpr([0.1, 0.2], [0.9, 0.8]) == 1.0
    id_s = np.arange(1, 21) / 20.0
    # 19 of 20 ID scores are >= 0.10, so 0.10 is the highest threshold with TPR >= 0.95
    assert fpr_at_tpr(id_s, [0.0, 0.06, 0.2, 0.9]) == 0.5
    assert fpr_at_tpr(id_s, [0.0, 0.06, 0.1, 0.9]) == 0.5
    with pytest.raises(ValueError):
        fpr_at_tpr([1.0], [])


@pytest.mark.parametrize("seed", range(50))
def test_metrics_equal_brute_force(seed):
    id_s, ood_s = fixture(seed)
    assert auroc(id_s, ood_s) == pairwise_auroc(id_s, ood_s)
    assert fpr_at_tpr(id_s, ood_s) == scan_fpr(id_s, ood_s)


scores = arrays(np.float64, st.integers(1, 25), elements=st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(a=scores, b=scores)
def test_auroc_complement(a, b):
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(a=scores, b=scores)
def test_metrics_invariant_to_monotone_transform(a, b):
    f = lambda s: np.arctan(s / 10.0) * 3.0 + 7.0  # noqa: E731 (strictly increasing)
    # transform must not merge distinct values for the invariance to be exact
    if len(np.unique(np.r_[a, b])) != len(np.unique(f(np.r_[a, b]))):
        return
    assert auroc(f(a), f(b)) == pytest.approx(auroc(a, b), abs=1e-12)
    assert fpr_at_tpr(f(a), f(b)) == fpr_at_tpr(a, b)


@settings(max_examples=100, deadline=None)
@given(a=scores, b=scores)
def test_metric_ranges(a, b):
    assert 0.0 <= auroc(a, b) <= 1.0
    assert 0.0 <= fpr_at_tpr(a, b) <= 1.0
