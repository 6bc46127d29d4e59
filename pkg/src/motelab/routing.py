"""Task registry, instruction-keyed sequence routing and learned token routing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .numerics import Tensor, softmax

HOMOGENEOUS = "homogeneous"
HETEROGENEOUS = "heterogeneous"
BATCHING_STRATEGIES = (HOMOGENEOUS, HETEROGENEOUS)

# Batch-level weight of the load-balancing term for token routing.
DEFAULT_AUX_WEIGHT = 0.01


class UnregisteredTaskError(KeyError):
    def __str__(self) -> str:
        return f"unregistered task: {self.args[0]!r}"


class RegistryError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class TaskEntry:
    prefix: str
    expert_index: int
    batching: str
    temperature: float


@dataclass(frozen=True)
class TaskRegistry:
    """Instruction id -> (prefix, expert, batching strategy, temperature).

    ``pairings`` maps a training task name (as used in a corpus) to the
    instruction ids applied to the anchor and the positive side of its pairs.
    """

    entries: dict[str, TaskEntry]
    pairings: dict[str, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        experts = [e.expert_index for e in self.entries.values()]
        if len(set(experts)) != len(experts):
            raise RegistryError(f"expert indices must be unique per task, got {experts}")
        for task_id, e in self.entries.items():
            if not e.temperature > 0:
                raise RegistryError(f"temperature for {task_id!r} must be positive")
            if e.batching not in BATCHING_STRATEGIES:
                raise RegistryError(f"unknown batching strategy {e.batching!r} for {task_id!r}")
            if e.expert_index < 0:
                raise RegistryError(f"negative expert index for {task_id!r}")
        for task, (a, p) in self.pairings.items():
            for inst in (a, p):
                if inst not in self.entries:
                    raise RegistryError(f"pairing {task!r} names unregistered instruction {inst!r}")

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, task_id: str) -> TaskEntry:
        try:
            return self.entries[task_id]
        except KeyError:
            raise UnregisteredTaskError(task_id) from None

    def instructions_for(self, task: str) -> tuple[str, str]:
        """(anchor instruction, positive instruction) for a training task."""
        if task in self.pairings:
            return self.pairings[task]
        if task in self.entries:
            return task, task
        raise UnregisteredTaskError(task)

    def training_tasks(self) -> list[str]:
        named = list(self.pairings)
        covered = {i for pair in self.pairings.values() for i in pair}
        return named + [t for t in self.entries if t not in covered]

    def with_prefixes(self, prefix: str) -> "TaskRegistry":
        return TaskRegistry(
            {k: replace(v, prefix=prefix) for k, v in self.entries.items()}, dict(self.pairings)
        )

    def static(self, temperature: float = 0.03) -> "TaskRegistry":
        """Same routing, heterogeneous batching and one temperature everywhere."""
        entries = {
            k: replace(v, batching=HETEROGENEOUS, temperature=temperature)
            for k, v in self.entries.items()
        }
        return TaskRegistry(entries, dict(self.pairings))


def default_registry() -> TaskRegistry:
    """The four-instruction setup: two retrieval roles, classification, clustering."""
    return TaskRegistry(
        entries={
            "search_query": TaskEntry("search query: ", 0, HOMOGENEOUS, 0.03),
            "search_document": TaskEntry("search document: ", 1, HOMOGENEOUS, 0.03),
            "classification": TaskEntry("classification: ", 2, HETEROGENEOUS, 0.03),
            "clustering": TaskEntry("clustering: ", 3, HETEROGENEOUS, 0.06),
        },
        pairings={
            "retrieval": ("search_query", "search_document"),
            "classification": ("classification", "classification"),
            "clustering": ("clustering", "clustering"),
        },
    )


def route_sequence(registry: TaskRegistry, task_id: str) -> int:
    return registry[task_id].expert_index


@dataclass(frozen=True)
class TokenRouteDecision:
    expert_index: np.ndarray  # (n,) int
    gate_probabilities: np.ndarray  # (n, E)

    @property
    def num_experts(self) -> int:
        return self.gate_probabilities.shape[1]


def route_tokens(gate, hidden_states) -> TokenRouteDecision:
    """Top-1 switch routing: softmax over gate logits, argmax with lowest-index ties."""
    g = gate.data if isinstance(gate, Tensor) else np.asarray(gate, dtype=np.float64)
    h = hidden_states.data if isinstance(hidden_states, Tensor) else np.asarray(hidden_states, dtype=np.float64)
    if h.ndim != 2 or g.ndim != 2 or h.shape[1] != g.shape[0]:
        raise ValueError(f"route_tokens shape mismatch: hidden {h.shape} vs gate {g.shape}")
    probs = softmax(Tensor(h @ g)).data
    return TokenRouteDecision(np.argmax(probs, axis=1), probs)


def load_balancing_loss(decision: TokenRouteDecision) -> float:
    """E * sum_e f_e * p_e; equals 1 at uniform load and uniform probabilities."""
    n = decision.expert_index.shape[0]
    if n == 0:
        raise EmptyBatchError("load balancing loss over zero tokens")
    num_experts = decision.num_experts
    fractions = np.bincount(decision.expert_index, minlength=num_experts) / n
    mean_probs = decision.gate_probabilities.mean(axis=0)
    return float(num_experts * np.dot(fractions, mean_probs))
