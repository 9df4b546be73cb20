"""Classification metrics: balanced accuracy, weighted F1, Cohen's kappa, AUROC, AUC-PR."""

from __future__ import annotations

import numpy as np


def confusion(labels, preds, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes))
    np.add.at(m, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1.0)
    return m


def balanced_accuracy(cm: np.ndarray) -> float:
    support = cm.sum(1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def weighted_f1(cm: np.ndarray) -> float:
    tp = np.diag(cm)
    pred_tot, true_tot = cm.sum(0), cm.sum(1)
    prec = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.sum(f1 * true_tot) / true_tot.sum())


def cohen_kappa(cm: np.ndarray) -> float:
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(np.sum(cm.sum(0) * cm.sum(1))) / (n * n)
    if pe == 1.0:
        return 1.0 if po == 1.0 else 0.0
    return float((po - pe) / (1.0 - pe))


def auroc(labels, scores) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get average ranks)."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(labels, scores) -> float:
    """AUC-PR as step-wise average precision: sum_n (R_n - R_{n-1}) P_n over distinct thresholds."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.sum() == 0:
        return float("nan")
    order = np.argsort(-s, kind="mergesort")
    y, s = y[order], s[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]       # end of each tie block
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def metric_report(labels, probs: np.ndarray) -> dict:
    """Metrics from class probabilities (N, C). Binary tasks add AUROC and AUC-PR."""
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[1]
    preds = probs.argmax(1)
    cm = confusion(labels, preds, n_classes)
    report = {"balanced_accuracy": balanced_accuracy(cm), "weighted_f1": weighted_f1(cm),
              "cohen_kappa": cohen_kappa(cm), "n": int(len(preds))}
    if n_classes == 2:
        report["auroc"] = auroc(labels, probs[:, 1])
        report["auc_pr"] = average_precision(labels, probs[:, 1])
    return report


def majority_baseline(train_labels, test_labels, n_classes: int) -> float:
    """Balanced accuracy of always predicting the most frequent training class."""
    major = int(np.argmax(np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes)))
    cm = confusion(test_labels, np.full(len(test_labels), major), n_classes)
    return balanced_accuracy(cm)
