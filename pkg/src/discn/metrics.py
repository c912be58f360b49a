"""Binary classification metrics with AD as the positive class."""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

THRESHOLD = 0.5
METRICS = ("accuracy", "recall", "precision", "f1", "auc")


def predict(scores: Sequence[float], threshold: float = THRESHOLD) -> np.ndarray:
    """Positive iff score > threshold; a score of exactly 0.5 is negative."""
    return (np.asarray(scores, dtype=float) > threshold).astype(int)


def binary_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Dict[str, float]:
    """Accuracy / recall / precision / F1; undefined ratios are reported as 0."""
    y, p = np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    acc = float((p == y).mean()) if len(y) else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"accuracy": acc, "recall": rec, "precision": prec, "f1": f1}


def auc_concordance(scores: Sequence[float], y_true: Sequence[int]) -> Optional[float]:
    """P(score_pos > score_neg) + 0.5 P(tie) over all pos/neg pairs; None if one class."""
    s, y = np.asarray(scores, dtype=float), np.asarray(y_true, dtype=int)
    pos, neg = s[y == 1], s[y == 0]
    if not len(pos) or not len(neg):
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def roc_points(scores: Sequence[float], y_true: Sequence[int]) -> List[Tuple[float, float]]:
    """(FPR, TPR) for a threshold sweep over the distinct scores, from (0,0) to (1,1)."""
    s, y = np.asarray(scores, dtype=float), np.asarray(y_true, dtype=int)
    P, N = int((y == 1).sum()), int((y == 0).sum())
    pts = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        sel = s >= thr
        tpr = (sel & (y == 1)).sum() / P if P else 0.0
        fpr = (sel & (y == 0)).sum() / N if N else 0.0
        pts.append((float(fpr), float(tpr)))
    if pts[-1] != (1.0, 1.0):
        pts.append((1.0, 1.0))
    return pts


def auc_trapezoid(points: Sequence[Tuple[float, float]]) -> float:
    x = np.array([p[0] for p in points])
    y = np.array([p[1] for p in points])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def evaluate_scores(scores: Sequence[float], y_true: Sequence[int]) -> Dict[str, Optional[float]]:
    out = binary_metrics(y_true, predict(scores))
    out["auc"] = auc_concordance(scores, y_true)
    return out


def aggregate(per_fold: Sequence[Dict[str, Optional[float]]]) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean and population std across folds; null entries are skipped."""
    agg = {}
    for m in METRICS:
        vals = [f[m] for f in per_fold if f.get(m) is not None]
        agg[m] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals \
            else {"mean": None, "std": None, "n": 0}
    return agg
