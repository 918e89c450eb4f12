"""Brute-force reference implementations, deliberately naive and independent
of the package code they check."""

import itertools
import math

import numpy as np

MAJOR = ("atypical_pigment_network", "blue_whitish_veil", "atypical_vascular_pattern")
MINOR = ("irregular_streaks", "irregular_pigmentation", "irregular_dots_globules", "regression_structures")


def checklist_score(flags: dict) -> int:
    score = 0
    for name in MAJOR:
        if flags[name]:
            score += 2
    for name in MINOR:
        if flags[name]:
            score += 1
    return score


def all_assessments():
    names = MAJOR + MINOR
    for bits in itertools.product((False, True), repeat=len(names)):
        yield dict(zip(names, bits))


def pairwise_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def class_weights(n_neg, n_pos):
    n = n_neg + n_pos
    return n / (2.0 * n_neg), n / (2.0 * n_pos)


def weighted_bce(scores, labels, w_neg, w_pos, eps=1e-7):
    total = 0.0
    for s, y in zip(scores, labels):
        s = min(max(s, eps), 1 - eps)
        w = w_pos if y == 1 else w_neg
        total += w * -(y * math.log(s) + (1 - y) * math.log(1 - s))
    return total / len(scores)


def mean_abs(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += abs(x - y)
    return total / a.size


def nearest_upsample(img):
    """(C, H, W) -> (C, 2H, 2W) by copying each pixel into a 2x2 block."""
    c, h, w = img.shape
    out = np.zeros((c, 2 * h, 2 * w), dtype=np.float64)
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, i, j] = img[:, i // 2, j // 2]
    return out


def central_difference(f, x, i, h):
    old = float(x[i])  # copy; x[i] may be a view
    x[i] = old + h
    up = f()
    x[i] = old - h
    down = f()
    x[i] = old
    return (up - down) / (2 * h)


def gradient_check(loss_fn, params, grads, rng, n=10, h=1e-6):
    """Worst relative error between autograd and central differences on ``n`` random parameters."""
    import torch

    def f():
        with torch.no_grad():
            return loss_fn().item()

    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(len(params)))
        flat = params[k].data.view(-1)
        i = int(rng.integers(flat.numel()))
        numeric = central_difference(f, flat, i, h)
        analytic = grads[k].view(-1)[i].item()
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return worst
