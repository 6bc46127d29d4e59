"""Ranking, classification, clustering and correlation metrics.

All entropies use natural logarithms; the base cancels in every ratio.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np


class EmptyEvaluationError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


RankedResult = Sequence[tuple[Hashable, int]]


def _relevances(r) -> list[int]:
    rels = [item[1] if isinstance(item, tuple) else item for item in r]
    for rel in rels:
        if rel < 0 or int(rel) != rel:
            raise ValueError(f"relevance must be a non-negative integer, got {rel!r}")
    return [int(x) for x in rels]


def dcg_at_k(relevances: Sequence[int], k: int) -> float:
    return sum((2.0**rel - 1.0) / math.log2(i + 2) for i, rel in enumerate(relevances[:k]))


def ndcg_at_k(r, k: int = 10) -> float:
    """NDCG@k with gains 2^rel - 1; 0.0 when no result is relevant.

    ``r`` is either a ranked list of ``(item_id, relevance)`` or plain relevances.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rels = _relevances(r)
    ideal = dcg_at_k(sorted(rels, reverse=True), k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(rels, k) / ideal


def accuracy(tp: int, tn: int, fp: int, fn: int) -> float:
    total = tp + tn + fp + fn
    if min(tp, tn, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    if total == 0:
        raise EmptyEvaluationError("accuracy over zero instances")
    return (tp + tn) / total


def classification_accuracy(y_true: Sequence, y_pred: Sequence) -> float:
    """Multi-class accuracy: correct predictions over all predictions."""
    if len(y_true) != len(y_pred):
        raise ValueError("label lists differ in length")
    correct = sum(a == b for a, b in zip(y_true, y_pred))
    return accuracy(correct, 0, len(y_true) - correct, 0)


@dataclass(frozen=True)
class VMeasure:
    homogeneity: float
    completeness: float
    v: float


def _entropy(counts: Iterable[int], n: int) -> float:
    return -sum((c / n) * math.log(c / n) for c in counts if c)


def v_measure(classes: Sequence[Hashable], clusters: Sequence[Hashable], beta: float = 1.0) -> VMeasure:
    if len(classes) != len(clusters):
        raise ValueError("classes and clusters differ in length")
    if not classes:
        raise EmptyEvaluationError("v-measure of an empty labelling")
    if not beta > 0:
        raise ValueError("beta must be positive")
    n = len(classes)
    joint = Counter(zip(classes, clusters))
    class_counts = Counter(classes)
    cluster_counts = Counter(clusters)
    h_c = _entropy(class_counts.values(), n)
    h_k = _entropy(cluster_counts.values(), n)
    # H(C|K) = -sum n_ck/n log(n_ck / n_k)
    h_c_given_k = -sum((nck / n) * math.log(nck / cluster_counts[k]) for (c, k), nck in joint.items())
    h_k_given_c = -sum((nck / n) * math.log(nck / class_counts[c]) for (c, k), nck in joint.items())
    homogeneity = 1.0 if h_c == 0.0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0.0 else 1.0 - h_k_given_c / h_k
    homogeneity = min(1.0, max(0.0, homogeneity))
    completeness = min(1.0, max(0.0, completeness))
    denom = beta * homogeneity + completeness
    v = 0.0 if denom == 0.0 else (1.0 + beta) * homogeneity * completeness / denom
    return VMeasure(homogeneity, completeness, v)


def _is_positive(label) -> bool:
    if isinstance(label, str):
        if label in ("+", "positive", "pos", "1"):
            return True
        if label in ("-", "negative", "neg", "0"):
            return False
        raise ValueError(f"unrecognized label {label!r}")
    return bool(label)


def average_precision(ranking: Sequence) -> float:
    """(1/P) * sum_k k / rank(k) over the ranks of the positives in ``ranking``."""
    ranks = [i + 1 for i, label in enumerate(ranking) if _is_positive(label)]
    if not ranks:
        raise UndefinedMetricError("average precision needs at least one positive")
    return sum(k / rank for k, rank in enumerate(ranks, start=1)) / len(ranks)


def mean_average_precision(rankings: Iterable[Sequence]) -> float:
    aps = [average_precision(r) for r in rankings]
    if not aps:
        raise EmptyEvaluationError("MAP over zero queries")
    return sum(aps) / len(aps)


def fractional_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(values, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho; with ties, the Pearson correlation of fractional ranks."""
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    n = len(x)
    if n < 2:
        raise UndefinedMetricError("spearman needs at least two observations")
    if len(set(x)) == 1 or len(set(y)) == 1:
        raise UndefinedMetricError("spearman is undefined for constant input")
    rx, ry = fractional_ranks(x), fractional_ranks(y)
    if len(set(x)) == n and len(set(y)) == n:
        d2 = float(np.sum((rx - ry) ** 2))
        rho = 1.0 - 6.0 * d2 / (n * (n * n - 1))
    else:
        cx, cy = rx - rx.mean(), ry - ry.mean()
        rho = float(np.dot(cx, cy) / math.sqrt(np.dot(cx, cx) * np.dot(cy, cy)))
    return min(1.0, max(-1.0, rho))


# ---------------------------------------------------------------------------
# run files


RUN_COLUMNS = ("query_id", "item_id", "score", "relevance")
REPORT_COLUMNS = ("query_id", "ndcg_at_10", "average_precision")


def read_run_file(path: str | Path) -> dict[str, list[tuple[str, float, int]]]:
    queries: dict[str, list[tuple[str, float, int]]] = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in RUN_COLUMNS):
            raise ValueError(f"{path}: run file needs columns {', '.join(RUN_COLUMNS)}")
        for row in reader:
            queries[row["query_id"]].append((row["item_id"], float(row["score"]), int(row["relevance"])))
    return dict(queries)


def score_run(queries: dict[str, list[tuple[str, float, int]]], k: int = 10) -> list[tuple[str, float, float | None]]:
    """Per-query NDCG@k and AP (relevance > 0 counts as positive); items ranked by descending score."""
    rows = []
    for qid in sorted(queries):
        ranked = sorted(queries[qid], key=lambda t: (-t[1], t[0]))
        rels = [rel for _, _, rel in ranked]
        ap = average_precision([rel > 0 for rel in rels]) if any(rels) else None
        rows.append((qid, ndcg_at_k(rels, k), ap))
    return rows


def write_report(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for qid, ndcg, ap in rows:
            w.writerow([qid, format(ndcg, ".17g"), "" if ap is None else format(ap, ".17g")])
