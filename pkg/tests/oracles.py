"""Brute-force reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def roc_auc_pairs(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties counted 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def average_precision_enum(scores, labels) -> float:
    """Step-interpolated AP: walk every distinct threshold from the top."""
    npos = sum(1 for y in labels if y)
    prev_recall = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        recall = tp / npos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def recall_at_fpr_enum(scores, labels, budget) -> float:
    """Best recall over every alert set ``score >= t`` whose FPR stays within budget."""
    npos = sum(1 for y in labels if y)
    nneg = len(labels) - npos
    best = 0.0
    for t in sorted(set(scores)) + [math.inf]:
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
        if fp <= budget * nneg + 1e-9:
            tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
            best = max(best, tp / npos)
    return best


def random_instance(rng: np.random.Generator, n_max: int = 200):
    """Scores and labels with both classes, frequent ties, and varied prevalence."""
    n = int(rng.integers(2, n_max + 1))
    labels = rng.random(n) < rng.uniform(0.05, 0.95)
    labels[0], labels[1] = True, False
    rng.shuffle(labels)
    scores = rng.random(n) + labels * rng.uniform(0, 1.5)
    if rng.random() < 0.5:
        scores = np.round(scores, int(rng.integers(0, 3)))
    return scores, labels.astype(int)
