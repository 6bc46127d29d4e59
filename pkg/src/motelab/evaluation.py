"""Held-out evaluation of an encoder on the synthetic retrieval, classification and clustering tasks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import EvalSplit, make_rng
from .metrics import average_precision, classification_accuracy, ndcg_at_k, v_measure
from .model import ModelCheckpoint, encode_many


@dataclass(frozen=True)
class RetrievalScore:
    dataset_id: str
    ndcg_at_10: float
    map: float


def rank_documents(query_embs: np.ndarray, doc_embs: np.ndarray) -> np.ndarray:
    """Document indices per query, best first; ties broken by lower index."""
    scores = query_embs @ doc_embs.T
    return np.argsort(-scores, axis=1, kind="stable")


def evaluate_retrieval(model: ModelCheckpoint, split: EvalSplit, k: int = 10,
                       query_task: str = "search_query", doc_task: str = "search_document") -> list[RetrievalScore]:
    """Query i of a dataset has exactly one relevant document, document i of the same dataset."""
    out = []
    for ds in sorted(split.retrieval):
        queries, docs = split.retrieval[ds]
        order = rank_documents(encode_many(model, query_task, queries), encode_many(model, doc_task, docs))
        ndcgs, aps = [], []
        for i, ranking in enumerate(order):
            rels = (ranking == i).astype(int)
            ndcgs.append(ndcg_at_k(list(rels), k))
            aps.append(average_precision(list(rels)))
        out.append(RetrievalScore(ds, float(np.mean(ndcgs)), float(np.mean(aps))))
    return out


def mean_retrieval_ndcg(scores: list[RetrievalScore]) -> float:
    return float(np.mean([s.ndcg_at_10 for s in scores]))


def nearest_centroid_predict(train_x: np.ndarray, train_y, test_x: np.ndarray) -> list:
    labels = sorted(set(train_y))
    y = np.asarray(train_y)
    centroids = np.stack([train_x[y == c].mean(axis=0) for c in labels])
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    centroids = centroids / np.where(norms > 0, norms, 1.0)
    best = np.argmax(test_x @ centroids.T, axis=1)
    return [labels[i] for i in best]


def evaluate_classification(model: ModelCheckpoint, split: EvalSplit, task: str = "classification") -> float:
    tr_x, tr_y, te_x, te_y = split.classification
    pred = nearest_centroid_predict(encode_many(model, task, tr_x), tr_y, encode_many(model, task, te_x))
    return classification_accuracy(te_y, pred)


def kmeans(x: np.ndarray, k: int, seed: int = 0, iters: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic for a given seed."""
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = make_rng(seed, "kmeans")
    centers = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.stack(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(x[idx])
    c = np.stack(centers)
    assign = np.full(n, -1)
    for _ in range(iters):
        new = np.argmin(((x[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return assign


def evaluate_clustering(model: ModelCheckpoint, split: EvalSplit, task: str = "clustering", seed: int = 0) -> float:
    seqs, labels = split.clustering
    emb = encode_many(model, task, seqs)
    assign = kmeans(emb, len(set(labels)), seed)
    return v_measure(labels, list(assign)).v


EVAL_COLUMNS = ("task", "dataset", "metric", "value")


def evaluate_all(model: ModelCheckpoint, split: EvalSplit) -> list[tuple[str, str, str, float]]:
    rows = []
    for s in evaluate_retrieval(model, split):
        rows.append(("retrieval", s.dataset_id, "ndcg_at_10", s.ndcg_at_10))
        rows.append(("retrieval", s.dataset_id, "map", s.map))
    rows.append(("classification", "all", "accuracy", evaluate_classification(model, split)))
    rows.append(("clustering", "all", "v_measure", evaluate_clustering(model, split)))
    return rows


def write_eval_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for task, ds, metric, value in rows:
            w.writerow([task, ds, metric, format(value, ".17g")])
