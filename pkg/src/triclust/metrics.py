"""External clustering metrics: NMI, ACC (Hungarian matching) and ARI."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

NMI_AVERAGES = ("arithmetic", "geometric")


def _labels(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).reshape(-1)
    true = np.asarray(true).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"label arrays differ in length: {pred.size} vs {true.size}")
    if pred.size == 0:
        raise ValueError("need at least one sample")
    if not (np.issubdtype(pred.dtype, np.integer) and np.issubdtype(true.dtype, np.integer)):
        raise ValueError("labels must be integers")
    if pred.min() < 0 or true.min() < 0:
        raise ValueError("labels must be non-negative")
    return pred, true


def contingency(pred, true) -> np.ndarray:
    """Counts[i, j] = number of samples with predicted label i and true label j."""
    pred, true = _labels(pred, true)
    table = np.zeros((pred.max() + 1, true.max() + 1), dtype=np.int64)
    np.add.at(table, (pred, true), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, true, average: str = "arithmetic") -> float:
    """Mutual information normalized by the arithmetic (or geometric) mean entropy."""
    if average not in NMI_AVERAGES:
        raise ValueError(f"unknown NMI normalization {average!r}")
    table = contingency(pred, true).astype(np.float64)
    n = table.sum()
    h_pred = _entropy(table.sum(axis=1))
    h_true = _entropy(table.sum(axis=0))
    nz = table > 0
    if (nz.sum(axis=0) <= 1).all() and (nz.sum(axis=1) <= 1).all():
        # same partition up to relabeling (includes two single-block partitions)
        return 1.0
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))
    mi = float((table[nz] / n * np.log(table[nz] * n / outer[nz])).sum())
    if average == "arithmetic":
        denom = (h_pred + h_true) / 2
    else:
        denom = np.sqrt(h_pred * h_true)
    if denom == 0.0:
        # one side constant, the other not
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def acc(pred, true) -> float:
    """Best one-to-one matching accuracy, solved as an assignment on the padded contingency table."""
    table = contingency(pred, true)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded.max() - padded)
    return float(padded[rows, cols].sum() / table.sum())


def _pairs(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2


def ari(pred, true) -> float:
    table = contingency(pred, true).astype(np.float64)
    n = table.sum()
    if n < 2:
        raise ValueError("ARI needs at least two samples")
    index = _pairs(table).sum()
    a = _pairs(table.sum(axis=1)).sum()
    b = _pairs(table.sum(axis=0)).sum()
    expected = a * b / _pairs(n)
    max_index = (a + b) / 2
    if max_index == expected:
        # both partitions trivial (all singletons or one block) and therefore identical
        return 1.0
    return float((index - expected) / (max_index - expected))


def evaluate(pred, true, average: str = "arithmetic") -> dict[str, float]:
    return {"nmi": nmi(pred, true, average), "acc": acc(pred, true), "ari": ari(pred, true)}


def largest_cluster_share(pred) -> float:
    pred = np.asarray(pred).reshape(-1)
    return float(np.bincount(pred).max() / pred.size)
