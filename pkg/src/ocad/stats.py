"""Fold planning, ROC/AUC, thresholding, classification metrics, and
one-way ANOVA with exact F-distribution p-values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PD = "pd"
CONTROL = "control"


# ---------------------------------------------------------------------------
# F distribution via the regularized incomplete beta function

def _betacf(a, b, x, max_iter=500, tol=1e-15):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise ValueError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_beta = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - ln_beta)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def f_cdf(x, d1, d2):
    """CDF of the F distribution with (d1, d2) degrees of freedom."""
    if d1 < 1 or d2 < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if x < 0:
        raise ValueError("F statistic must be >= 0")
    if x == 0.0:
        return 0.0
    t = d1 * x / (d1 * x + d2)
    return betainc_reg(d1 / 2.0, d2 / 2.0, t)


# ---------------------------------------------------------------------------
# One-way ANOVA

@dataclass
class AnovaResult:
    f_stat: float
    p_value: float
    df_between: int
    df_within: int
    group_means: list
    group_vars: list
    degenerate: bool = False


def one_way_anova(groups):
    """One-way ANOVA over k >= 2 groups of reals.

    Degenerate cases: zero between- and within-group variance gives F = 0,
    p = 1; zero within- with nonzero between-group variance gives p = 0 and
    the result is flagged degenerate.
    """
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) < 2 for g in groups):
        raise ValueError("every group needs at least two observations")
    n_total = sum(len(g) for g in groups)
    k = len(groups)
    if n_total <= k:
        raise ValueError("total observations must exceed group count")
    grand = sum(float(g.sum()) for g in groups) / n_total
    ssb = sum(len(g) * (float(g.mean()) - grand) ** 2 for g in groups)
    ssw = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    df_b = k - 1
    df_w = n_total - k
    means = [float(g.mean()) for g in groups]
    variances = [float(g.var(ddof=1)) for g in groups]
    if ssw == 0.0:
        if ssb == 0.0:
            return AnovaResult(0.0, 1.0, df_b, df_w, means, variances)
        return AnovaResult(math.inf, 0.0, df_b, df_w, means, variances,
                           degenerate=True)
    f = (ssb / df_b) / (ssw / df_w)
    p = 1.0 - f_cdf(f, df_b, df_w)
    return AnovaResult(f, p, df_b, df_w, means, variances)


# ---------------------------------------------------------------------------
# ROC / AUC and thresholding

def _oriented(scores, labels, positive_rule):
    """Return (oriented scores, boolean positives). Higher oriented score
    means 'more PD-like' regardless of the orientation convention."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray([lab == PD for lab in labels], dtype=bool)
    if len(scores) != len(pos):
        raise ValueError("scores and labels differ in length")
    if positive_rule == "pd_low":
        return -scores, pos
    if positive_rule == "pd_high":
        return scores, pos
    raise ValueError(f"unknown positive_rule {positive_rule!r}")


def roc_auc(scores, labels, positive_rule="pd_low"):
    """ROC points and trapezoidal AUC. PD is the positive class.

    `positive_rule` states whether PD samples are expected at low scores
    (the trained-on-PD convention) or high scores. Ties are grouped.
    Returns (points, auc) where points are (fpr, tpr, threshold) with
    threshold in the original score scale.
    """
    s, pos = _oriented(scores, labels, positive_rule)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    pos_sorted = pos[order]
    points = [(0.0, 0.0, math.inf if positive_rule == "pd_high" else -math.inf)]
    tp = fp = 0
    i = 0
    n = len(s_sorted)
    auc = 0.0
    prev_fpr, prev_tpr = 0.0, 0.0
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(pos_sorted[i:j].sum())
        fp += (j - i) - int(pos_sorted[i:j].sum())
        tpr = tp / n_pos
        fpr = fp / n_neg
        thr = -s_sorted[i] if positive_rule == "pd_low" else s_sorted[i]
        points.append((fpr, tpr, float(thr)))
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0
        prev_fpr, prev_tpr = fpr, tpr
        i = j
    return points, auc


@dataclass
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float


def confusion_at_threshold(scores, labels, threshold, positive_rule="pd_low"):
    """Confusion counts and precision/recall/F1 with PD positive.

    With pd_low, predict PD iff score < threshold; with pd_high, iff
    score > threshold.
    """
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray([lab == PD for lab in labels], dtype=bool)
    if positive_rule == "pd_low":
        pred = scores < threshold
    elif positive_rule == "pd_high":
        pred = scores > threshold
    else:
        raise ValueError(f"unknown positive_rule {positive_rule!r}")
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return ConfusionMetrics(tp, fp, tn, fn, precision, recall, f1)


def select_threshold(scores, labels, positive_rule="pd_low", criterion="max_f1"):
    """Pick the threshold maximizing the criterion over midpoints between
    adjacent distinct scores. Ties break toward the smaller threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = [lab == PD for lab in labels]
    if all(pos) or not any(pos):
        raise ValueError("both classes must be present")
    distinct = np.unique(scores)
    lo, hi = distinct[0], distinct[-1]
    span = (hi - lo) if hi > lo else 1.0
    candidates = [lo - 0.5 * span]
    candidates += [(a + b) / 2.0 for a, b in zip(distinct[:-1], distinct[1:])]
    candidates.append(hi + 0.5 * span)

    def objective(thr):
        m = confusion_at_threshold(scores, labels, thr, positive_rule)
        if criterion == "max_f1":
            return m.f1
        if criterion == "youden":
            tpr = m.recall
            fpr = m.fp / (m.fp + m.tn) if m.fp + m.tn else 0.0
            return tpr - fpr
        raise ValueError(f"unknown criterion {criterion!r}")

    best_thr = candidates[0]
    best = objective(best_thr)
    for thr in candidates[1:]:
        val = objective(thr)
        if val > best:
            best, best_thr = val, thr
    return float(best_thr)


# ---------------------------------------------------------------------------
# Fold planning and subject aggregation

@dataclass
class Fold:
    train_pd: list
    val_pd: list
    val_control: list


@dataclass
class FoldPlan:
    folds: list
    uncovered_pd: list = field(default_factory=list)

    def check_no_leakage(self):
        for fold in self.folds:
            if set(fold.train_pd) & set(fold.val_pd):
                raise AssertionError("train/validation subject leakage")
        return True


def make_folds(pd_subjects, control_subjects, k, seed, n_train=10, n_val=3):
    """Plan k folds of a one-class protocol: PD subjects split n_train/n_val,
    every control subject in every fold's validation pool.

    Validation sets are pairwise disjoint while the shuffled subject supply
    lasts; with 13 subjects and k*n_val = 12 one subject stays uncovered and
    is reported in the plan.
    """
    pd_subjects = list(pd_subjects)
    control_subjects = list(control_subjects)
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(pd_subjects) < n_train + n_val:
        raise ValueError(
            f"need at least {n_train + n_val} PD subjects, got {len(pd_subjects)}")
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(pd_subjects))
    folds = []
    covered = set()
    pool = list(shuffled)
    for _ in range(k):
        if len(pool) < n_val:
            pool = pool + [s for s in shuffled if s not in pool]
        val = pool[:n_val]
        pool = pool[n_val:]
        remaining = [s for s in shuffled if s not in val]
        train = list(rng.permutation(remaining))[:n_train]
        folds.append(Fold(train_pd=sorted(train), val_pd=sorted(val),
                          val_control=sorted(control_subjects)))
        covered.update(val)
    uncovered = sorted(set(pd_subjects) - covered)
    return FoldPlan(folds=folds, uncovered_pd=uncovered)


def subject_aggregate(samples):
    """Mean score per subject. `samples` yields (subject_id, score) pairs or
    objects with .subject_id and .normalized attributes."""
    sums: dict = {}
    counts: dict = {}
    for item in samples:
        if isinstance(item, tuple):
            subject, score = item
        else:
            subject, score = item.subject_id, item.normalized
        sums[subject] = sums.get(subject, 0.0) + float(score)
        counts[subject] = counts.get(subject, 0) + 1
    return {s: sums[s] / counts[s] for s in sums}
