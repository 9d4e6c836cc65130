"""Independent reference implementations used as test oracles.

Deliberately naive: explicit loops, no shared code with the package.
"""
import math

import numpy as np


def brute_force_auc(scores, labels) -> float:
    """Count every (positive, negative) pair; ties score one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def trapezoid_roc_area(scores, labels) -> float:
    """Sweep every distinct threshold from high to low and integrate."""
    pairs = sorted(zip(scores, labels), key=lambda t: -t[0])
    n_pos = sum(1 for _, y in pairs if y)
    n_neg = len(pairs) - n_pos
    tp = fp = 0
    prev_fpr = prev_tpr = 0.0
    area = 0.0
    i = 0
    while i < len(pairs):
        j = i
        while j < len(pairs) and pairs[j][0] == pairs[i][0]:
            tp += pairs[j][1]
            fp += 1 - pairs[j][1]
            j += 1
        fpr, tpr = fp / n_neg, tp / n_pos
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2
        prev_fpr, prev_tpr = fpr, tpr
        i = j
    return area


def random_auc_instance(rng: np.random.Generator, max_points: int = 50):
    """Scores with injected ties and at least one positive and one negative."""
    n = int(rng.integers(2, max_points + 1))
    labels = np.zeros(n, dtype=int)
    n_pos = int(rng.integers(1, n))
    labels[rng.choice(n, n_pos, replace=False)] = 1
    levels = int(rng.integers(1, max(2, n // 2) + 1))
    if rng.random() < 0.5:
        scores = rng.integers(0, levels, size=n).astype(float) / max(levels, 1)
    else:
        scores = rng.random(n)
        dup = rng.random(n) < 0.3
        scores[dup] = scores[rng.integers(0, n, size=int(dup.sum()))]
    return scores, labels


def distance(a, b, metric: str) -> float:
    diffs = [abs(float(x) - float(y)) for x, y in zip(a, b)]
    if metric == "L1":
        return sum(diffs)
    if metric == "L2":
        return math.sqrt(sum(d * d for d in diffs))
    return max(diffs)


def brute_force_knn_predict(X, y, q, k: int, metric: str, classes) -> str:
    """Exhaustive scan; ties in distance broken by training index, votes by class order."""
    dists = [(distance(x, q, metric), i) for i, x in enumerate(X)]
    dists.sort()
    votes = {c: 0 for c in classes}
    for _, i in dists[:k]:
        votes[y[i]] += 1
    best = max(votes.values())
    return next(c for c in classes if votes[c] == best)
