"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports from triclust; every value is computed with plain Python
floats so the vectorized code is checked against an independent path.
"""
from __future__ import annotations

import itertools
import math


def matmul(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def cosine(u, v):
    dot = sum(x * y for x, y in zip(u, v))
    return dot / (math.sqrt(sum(x * x for x in u)) * math.sqrt(sum(y * y for y in v)))


def pair_mse(y, z):
    ny = math.sqrt(sum(v * v for v in y))
    nz = math.sqrt(sum(v * v for v in z))
    return sum((a / ny - b / nz) ** 2 for a, b in zip(y, z))


def instance_loss(y_a, y_c, z_b):
    n = len(z_b)
    l_ab = sum(pair_mse(y_a[i], z_b[i]) for i in range(n)) / n
    l_bc = sum(pair_mse(y_c[i], z_b[i]) for i in range(n)) / n
    return l_ab + l_bc


def columns(q):
    return [[row[j] for row in q] for j in range(len(q[0]))]


def infonce_side(anchor_cols, other_cols, tau, include_self_term=False):
    """Loss for every anchor column: positive is the same index in the other view."""
    m = len(anchor_cols)
    out = []
    for i in range(m):
        pos = math.exp(cosine(anchor_cols[i], other_cols[i]) / tau)
        denom = pos
        for j in range(m):
            if j != i:
                denom += math.exp(cosine(anchor_cols[i], anchor_cols[j]) / tau)
                denom += math.exp(cosine(anchor_cols[i], other_cols[j]) / tau)
        if include_self_term:
            denom += math.exp(cosine(anchor_cols[i], anchor_cols[i]) / tau)
        out.append(-math.log(pos / denom))
    return out


def entropy(qx, qy):
    h = 0.0
    for q in (qx, qy):
        total = sum(sum(row) for row in q)
        for col in columns(q):
            p = sum(col) / total
            if p > 0:
                h -= p * math.log(p)
    return h


def cluster_pair(qx, qy, tau, include_self_term=False, use_entropy=True):
    cx, cy = columns(qx), columns(qy)
    m = len(cx)
    lx = infonce_side(cx, cy, tau, include_self_term)
    ly = infonce_side(cy, cx, tau, include_self_term)
    loss = (sum(lx) + sum(ly)) / (2 * m)
    return loss - entropy(qx, qy) if use_entropy else loss


def cluster_loss(q_a, q_b, q_c, tau, include_self_term=False):
    return cluster_pair(q_a, q_b, tau, include_self_term) + cluster_pair(q_b, q_c, tau, include_self_term)


def best_matching_accuracy(pred, true):
    """Exhaustive search over every injective relabeling of predicted labels."""
    kp, kt = max(pred) + 1, max(true) + 1
    k = max(kp, kt)
    best = 0
    for perm in itertools.permutations(range(k), kp):
        hits = sum(1 for p, t in zip(pred, true) if perm[p] == t)
        best = max(best, hits)
    return best / len(pred)


def rand_pair_counts(pred, true):
    """ARI by enumerating every pair of samples."""
    n = len(pred)
    same_both = same_pred = same_true = 0
    for i in range(n):
        for j in range(i + 1, n):
            sp, st = pred[i] == pred[j], true[i] == true[j]
            same_pred += sp
            same_true += st
            same_both += sp and st
    pairs = n * (n - 1) / 2
    expected = same_pred * same_true / pairs
    max_index = (same_pred + same_true) / 2
    if max_index == expected:
        return 1.0
    return (same_both - expected) / (max_index - expected)


def nmi_from_entropies(pred, true):
    n = len(pred)

    def h(labels):
        counts = {}
        for v in labels:
            counts[v] = counts.get(v, 0) + 1
        return -sum(c / n * math.log(c / n) for c in counts.values())

    joint = h(list(zip(pred, true)))
    mi = h(pred) + h(true) - joint
    return mi / ((h(pred) + h(true)) / 2)
