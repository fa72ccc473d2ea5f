"""Evaluation metrics and significance tests for scored binary outcomes.

auc follows the rank (Mann-Whitney) formulation with half credit for ties;
logloss is the summed binary cross entropy, sharing its definition with the
training objective. The significance helpers return (statistic, p_value)
pairs: a rank-sum test for AUC-style comparisons and Welch's unequal-variance
t test for loss-style comparisons.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata
from scipy.stats import norm as normal_dist
from scipy.stats import t as t_dist

from .numerics import as_f64
from .predictor import cross_entropy_batch

# Largest pooled sample size for which the rank-sum p-value is computed by
# exhaustive enumeration; beyond it the normal approximation takes over.
EXACT_ENUM_LIMIT = 20


def _check_labels_scores(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    labels = as_f64(labels)
    scores = as_f64(scores)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(
            f"labels and scores must be matching 1-D arrays, got {labels.shape} and {scores.shape}"
        )
    if labels.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    bad = set(np.unique(labels)) - {0.0, 1.0}
    if bad:
        raise ValueError(f"labels must be 0 or 1, got {sorted(bad)}")
    return labels, scores


def auc(labels, scores) -> float:
    """Probability a positive outranks a negative, ties counting half.

    Needs at least one positive and one negative; a single-class input has no
    defined AUC and raises.
    """
    labels, scores = _check_labels_scores(labels, scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[labels == 1.0].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(labels, scores) -> float:
    """Summed binary cross entropy; scores must lie strictly inside (0, 1)."""
    labels, scores = _check_labels_scores(labels, scores)
    if scores.min() <= 0.0 or scores.max() >= 1.0:
        raise ValueError("logloss scores must lie strictly inside (0, 1)")
    return float(cross_entropy_batch(labels, scores).sum())


def metrics_report(labels, scores) -> dict:
    """Standard evaluation payload: auc, summed logloss, counts."""
    labels, scores = _check_labels_scores(labels, scores)
    return {
        "auc": auc(labels, scores),
        "logloss": logloss(labels, scores),
        "n": int(labels.size),
        "positives": int(labels.sum()),
    }


@dataclass(frozen=True)
class MannWhitneyResult:
    statistic: float
    p_value: float


def mann_whitney_u(a, b) -> MannWhitneyResult:
    """Rank-sum U of a over b (ties half) with a two-sided p-value.

    For pooled sizes up to EXACT_ENUM_LIMIT the p-value enumerates every
    group assignment exactly; larger inputs use the tie-corrected normal
    approximation (no continuity correction).
    """
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ValueError("mann_whitney_u needs two non-empty 1-D samples")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    if not np.isfinite(pooled).all():
        raise ValueError("mann_whitney_u inputs must be finite")
    ranks = rankdata(pooled, method="average")
    offset = n1 * (n1 + 1) / 2.0
    u_stat = float(ranks[:n1].sum() - offset)
    mu = n1 * n2 / 2.0
    total = n1 + n2
    if total <= EXACT_ENUM_LIMIT:
        observed = abs(u_stat - mu)
        hits = 0
        count = 0
        for combo in itertools.combinations(range(total), n1):
            u_perm = ranks[list(combo)].sum() - offset
            if abs(u_perm - mu) >= observed - 1e-12:
                hits += 1
            count += 1
        p = hits / count
    else:
        _, tie_counts = np.unique(pooled, return_counts=True)
        tie_term = float(((tie_counts**3) - tie_counts).sum())
        var = n1 * n2 / 12.0 * ((total + 1) - tie_term / (total * (total - 1)))
        if var <= 0.0:
            p = 1.0
        else:
            z = (u_stat - mu) / math.sqrt(var)
            p = min(1.0, 2.0 * float(normal_dist.sf(abs(z))))
    return MannWhitneyResult(statistic=u_stat, p_value=p)


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float


def t_test(a, b) -> TTestResult:
    """Welch's unequal-variance t test, two-sided.

    Both samples need at least two observations; two zero-variance samples
    leave the statistic undefined and raise.
    """
    a = as_f64(a)
    b = as_f64(b)
    if a.ndim != 1 or b.ndim != 1 or a.size < 2 or b.size < 2:
        raise ValueError("t_test needs two 1-D samples with at least 2 observations each")
    v1 = float(a.var(ddof=1))
    v2 = float(b.var(ddof=1))
    if v1 == 0.0 and v2 == 0.0:
        raise ValueError("t_test is undefined when both samples have zero variance")
    se1 = v1 / a.size
    se2 = v2 / b.size
    t_stat = (float(a.mean()) - float(b.mean())) / math.sqrt(se1 + se2)
    df = (se1 + se2) ** 2 / (se1**2 / (a.size - 1) + se2**2 / (b.size - 1))
    p = min(1.0, 2.0 * float(t_dist.sf(abs(t_stat), df)))
    return TTestResult(statistic=float(t_stat), p_value=float(p))
