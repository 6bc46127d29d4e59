"""Contrastive objective, task-aware batch construction and the AdamW training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import TaskStore, TrainingPair, make_rng
from .model import ModelCheckpoint, count_touches, embed_batch, load_all
from .numerics import Tensor
from .routing import DEFAULT_AUX_WEIGHT, HOMOGENEOUS, EmptyBatchError, TaskRegistry


class NormalizationError(ValueError):
    pass


class TrainingDivergenceError(FloatingPointError):
    pass


class EpochEnd(Exception):
    """Every task in the store has been consumed for this epoch."""


def info_nce_from_similarities(sims, temperature: float) -> Tensor:
    """Mean over rows of -log softmax(sims / temperature)[i, i]."""
    sims = sims if isinstance(sims, Tensor) else Tensor(sims)
    n = sims.shape[0]
    if n == 0:
        raise EmptyBatchError("InfoNCE over an empty batch")
    logp = nx.log_softmax(nx.div_scalar(sims, temperature), axis=1)
    return nx.scale(nx.mean(nx.pick(logp, np.arange(n))), -1.0)


def info_nce_tensor(anchors: Tensor, positives: Tensor, temperature: float) -> Tensor:
    """Each anchor contrasts its own positive against the other positives of the batch."""
    return info_nce_from_similarities(nx.matmul(anchors, nx.transpose(positives, (1, 0))), temperature)


def info_nce(anchor_embs, positive_embs, temperature: float) -> float:
    a = np.asarray(anchor_embs.data if isinstance(anchor_embs, Tensor) else anchor_embs, dtype=np.float64)
    p = np.asarray(positive_embs.data if isinstance(positive_embs, Tensor) else positive_embs, dtype=np.float64)
    if a.shape[0] == 0 or p.shape[0] == 0:
        raise EmptyBatchError("InfoNCE over an empty batch")
    if a.shape != p.shape:
        raise ValueError(f"anchor/positive shape mismatch: {a.shape} vs {p.shape}")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    for name, m in (("anchor", a), ("positive", p)):
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise NormalizationError(f"{name} embeddings are not unit-norm (max deviation {np.abs(norms - 1).max():.3g})")
    return info_nce_tensor(Tensor(a), Tensor(p), temperature).item()


# ---------------------------------------------------------------------------
# batch construction


@dataclass
class MiniBatch:
    task_id: str
    pairs: list[TrainingPair]
    temperature: float
    strategy: str
    source_datasets: frozenset[str]
    anchor_task: str
    positive_task: str


class TaskAwareSampler:
    """Single-task mini-batches drawn without replacement within one epoch.

    A task is picked with probability proportional to its remaining pairs.
    Homogeneous tasks fill the batch from one uniformly chosen dataset;
    heterogeneous tasks sample uniformly over the pooled remaining pairs of
    all their datasets. The last batch of a dataset or task may be short.
    """

    def __init__(self, store: TaskStore, registry: TaskRegistry, batch_size: int,
                 shuffle_rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if len(store) == 0:
            raise EmptyBatchError("cannot sample from an empty task store")
        self.store = store
        self.registry = registry
        self.batch_size = batch_size
        self.remaining: dict[str, dict[str, list[int]]] = {}
        for task, datasets in store.tasks.items():
            registry.instructions_for(task)
            self.remaining[task] = {
                ds: list(shuffle_rng.permutation(len(pairs))) for ds, pairs in datasets.items() if pairs
            }

    def remaining_count(self, task: str) -> int:
        return sum(len(v) for v in self.remaining[task].values())

    def next_batch(self, rng: np.random.Generator) -> MiniBatch:
        tasks = [t for t in self.remaining if self.remaining_count(t) > 0]
        if not tasks:
            raise EpochEnd()
        counts = np.array([self.remaining_count(t) for t in tasks], dtype=np.float64)
        task = tasks[int(rng.choice(len(tasks), p=counts / counts.sum()))]
        anchor_task, positive_task = self.registry.instructions_for(task)
        entry = self.registry[anchor_task]
        pools = self.remaining[task]
        if entry.batching == HOMOGENEOUS:
            live = [ds for ds, idx in pools.items() if idx]
            ds = live[int(rng.integers(len(live)))]
            take, pools[ds] = pools[ds][: self.batch_size], pools[ds][self.batch_size:]
            chosen = [(ds, i) for i in take]
        else:
            flat = [(ds, i) for ds, idx in pools.items() for i in idx]
            picks = rng.choice(len(flat), size=min(self.batch_size, len(flat)), replace=False)
            chosen = [flat[k] for k in picks]
            drop: dict[str, set[int]] = {}
            for ds, i in chosen:
                drop.setdefault(ds, set()).add(i)
            for ds, gone in drop.items():
                pools[ds] = [i for i in pools[ds] if i not in gone]
        pairs = [self.store.tasks[task][ds][i] for ds, i in chosen]
        return MiniBatch(task, pairs, entry.temperature, entry.batching,
                         frozenset(ds for ds, _ in chosen), anchor_task, positive_task)


def build_minibatch(store: TaskStore, registry: TaskRegistry, batch_size: int,
                    rng: np.random.Generator) -> MiniBatch:
    """One batch from a fresh epoch."""
    return TaskAwareSampler(store, registry, batch_size, rng).next_batch(rng)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    Each parameter keeps its own update count, so parameters skipped on some
    steps (experts not routed to) get the correct bias correction.
    """
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {path}")
    b1, b2 = state.betas
    state.step += 1
    for path, g in grads.items():
        p = params[path]
        if p.shape != g.shape:
            raise ValueError(f"{path}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(p)
            state.v[path] = np.zeros_like(p)
        v = state.v[path]
        t = state.counts[path] = state.counts.get(path, 0) + 1
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class Schedule:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    seed: int = 0
    aux_weight: float = DEFAULT_AUX_WEIGHT


# Reference full-scale values; desk runs use Schedule() defaults.
PAPER_SCHEDULE = Schedule(steps=1, batch_size=6144, lr=5e-6, weight_decay=0.1)

LOSS_LOG_COLUMNS = ("step", "task_id", "strategy", "temperature", "contrastive_loss", "aux_loss")


@dataclass
class LossLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, step: int, batch: MiniBatch, contrastive: float, aux: float) -> None:
        self.rows.append((step, batch.task_id, batch.strategy, batch.temperature, contrastive, aux))

    def losses(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_LOG_COLUMNS)
            for step, task, strategy, temp, c, a in self.rows:
                w.writerow([step, task, strategy, repr(float(temp)), format(c, ".17g"), format(a, ".17g")])


@dataclass
class StepResult:
    contrastive: float
    aux: float
    grads: dict[str, np.ndarray]
    touched: set[str]


def compute_gradients(model: ModelCheckpoint, batch: MiniBatch, aux_weight: float = DEFAULT_AUX_WEIGHT) -> StepResult:
    """Forward, loss and backward for one batch; gradients of untouched parameters are zero."""
    for t in model.params.values():
        t.requires_grad = True
        t.grad = None
    aux_terms: list[Tensor] = []
    with count_touches(model) as touched, nx.Tape() as tape:
        anchors = embed_batch(model, batch.anchor_task, [p.anchor for p in batch.pairs], aux_terms)
        positives = embed_batch(model, batch.positive_task, [p.positive for p in batch.pairs], aux_terms)
        contrastive = info_nce_tensor(anchors, positives, batch.temperature)
        loss = contrastive
        aux = None
        if aux_terms:
            aux = nx.scale(sum(aux_terms[1:], aux_terms[0]), 1.0 / len(aux_terms))
            loss = loss + nx.scale(aux, aux_weight)
    tape.backward(loss)
    grads = {}
    for path, t in model.params.items():
        grads[path] = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.grad = None
        t.requires_grad = False
    return StepResult(contrastive.item(), aux.item() if aux is not None else 0.0, grads, set(touched.paths))


def train(model: ModelCheckpoint, store: TaskStore, registry: TaskRegistry | None = None,
          schedule: Schedule = Schedule(), progress=None) -> tuple[ModelCheckpoint, LossLog]:
    """Train ``model`` in place; deterministic given ``schedule.seed``.

    Only parameters that took part in a step's forward pass are updated on
    that step, so task experts see exactly the batches routed to them.
    """
    registry = registry or model.registry
    load_all(model)
    state = OptimizerState(lr=schedule.lr, betas=schedule.betas, eps=schedule.eps,
                           weight_decay=schedule.weight_decay)
    log = LossLog()
    epoch = 0
    sampler = TaskAwareSampler(store, registry, schedule.batch_size, make_rng(schedule.seed, "epoch", epoch))
    for step in range(schedule.steps):
        rng = make_rng(schedule.seed, "step", step)
        try:
            batch = sampler.next_batch(rng)
        except EpochEnd:
            epoch += 1
            sampler = TaskAwareSampler(store, registry, schedule.batch_size, make_rng(schedule.seed, "epoch", epoch))
            batch = sampler.next_batch(rng)
        result = compute_gradients(model, batch, schedule.aux_weight)
        if not math.isfinite(result.contrastive):
            raise TrainingDivergenceError(f"non-finite loss at step {step}")
        params = {p: model.params[p].data for p in result.touched}
        adamw_step(params, {p: result.grads[p] for p in result.touched}, state)
        log.append(step, batch, result.contrastive, result.aux)
        if progress is not None:
            progress(step, batch, result)
    return model, log


def window_means(log: LossLog, window: int = 20) -> tuple[float, float]:
    losses = log.losses()
    return float(losses[:window].mean()), float(losses[-window:].mean())


