"""Accuracy and OOD-detection metrics (higher score = more in-distribution)."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _nonempty(name, arr):
    arr = np.asarray(arr, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def top1_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).ravel()
    t = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("empty predictions")
    if p.shape != t.shape:
        raise ValueError("predictions and labels differ in length")
    return float(np.mean(p == t))


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney estimate of P(id > ood), ties counted as one half."""
    s_id = _nonempty("id_scores", id_scores)
    s_ood = _nonempty("ood_scores", ood_scores)
    ranks = rankdata(np.concatenate([s_id, s_ood]))  # average ranks on ties
    n, m = s_id.size, s_ood.size
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores at or above the largest threshold keeping TPR >= target."""
    s_id = _nonempty("id_scores", id_scores)
    s_ood = _nonempty("ood_scores", ood_scores)
    n = s_id.size
    desc = np.sort(s_id)[::-1]
    # number of ID scores >= each candidate threshold (ties included)
    at_or_above = n - np.searchsorted(np.sort(s_id), desc, side="left")
    ok = at_or_above / n >= tpr_target
    if not ok.any():
        return 1.0
    threshold = desc[np.argmax(ok)]
    return float(np.mean(s_ood >= threshold))
