"""Inter-task embedding similarity and the lower-tailed Welch t-test."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelCheckpoint, encode_many
from .numerics import cosine_similarity


class DegenerateSampleError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Student t distribution


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 20000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float, one_minus_x: float | None = None) -> float:
    """I_x(a, b). Pass ``one_minus_x`` when it is known more precisely than 1 - x."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    y = 1.0 - x if one_minus_x is None else one_minus_x
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(y)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with real ``df`` > 0."""
    if not df > 0:
        raise ValueError("degrees of freedom must be positive")
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    t2 = t * t
    x = df / (df + t2)
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, x, t2 / (df + t2))
    return 1.0 - tail if t > 0 else tail


# ---------------------------------------------------------------------------
# Welch


@dataclass(frozen=True)
class WelchResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float


def welch_one_sided(x: Sequence[float], y: Sequence[float]) -> WelchResult:
    """Test H_A: mean(x) < mean(y); p is the lower tail P(T_df <= t)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise DegenerateSampleError("each sample needs at least two observations")
    vx = x.var(ddof=1) / n
    vy = y.var(ddof=1) / m
    if vx == 0.0 and vy == 0.0:
        raise DegenerateSampleError("both samples have zero variance")
    se2 = vx + vy
    t = float((x.mean() - y.mean()) / math.sqrt(se2))
    df = se2 * se2 / (vx * vx / (n - 1) + vy * vy / (m - 1))
    return WelchResult(t, float(df), t_cdf(t, df))


# ---------------------------------------------------------------------------
# inter-task similarity


@dataclass(frozen=True)
class SimilaritySample:
    """Cosine similarity between one sequence's embeddings under each pair of tasks."""

    sequence_index: int
    values: dict[tuple[str, str], float]

    def get(self, a: str, b: str) -> float:
        if (a, b) in self.values:
            return self.values[(a, b)]
        return self.values[(b, a)]


def task_pairs(tasks: Sequence[str]) -> list[tuple[str, str]]:
    return list(itertools.combinations(tasks, 2))


def inter_task_similarity(model: ModelCheckpoint, tasks: Sequence[str],
                          sequences: Sequence[Sequence[int]]) -> list[SimilaritySample]:
    if len(tasks) < 2:
        raise ValueError("need at least two tasks")
    if len(sequences) < 2:
        raise ValueError("need at least two sequences")
    embs = {t: encode_many(model, t, sequences) for t in tasks}
    pairs = task_pairs(tasks)
    return [
        SimilaritySample(i, {(a, b): cosine_similarity(embs[a][i], embs[b][i]) for a, b in pairs})
        for i in range(len(sequences))
    ]


@dataclass(frozen=True)
class PairComparison:
    pair: tuple[str, str]
    label_x: str
    mean_x: float
    std_x: float
    label_y: str
    mean_y: float
    std_y: float
    result: WelchResult


def compare_similarity(x: list[SimilaritySample], y: list[SimilaritySample],
                       label_x: str = "mote", label_y: str = "ic") -> list[PairComparison]:
    """Welch test per task pair with H_A: similarity under x is lower than under y."""
    out = []
    for pair in x[0].values:
        xs = np.array([s.get(*pair) for s in x])
        ys = np.array([s.get(*pair) for s in y])
        out.append(PairComparison(pair, label_x, float(xs.mean()), float(xs.std(ddof=1)),
                                  label_y, float(ys.mean()), float(ys.std(ddof=1)), welch_one_sided(xs, ys)))
    return out


SIMILARITY_COLUMNS = ("sequence", "task_a", "task_b", "similarity")
WELCH_COLUMNS = ("task_a", "task_b", "method_x", "mean_x", "std_x", "method_y", "mean_y", "std_y",
                 "t", "df", "p")


def emit_report(rows: Sequence, path: str | Path) -> Path:
    """Write similarity samples or pair comparisons as CSV with 17 significant digits.

    The schema follows the row type; an empty list yields the similarity header.
    """
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows and isinstance(rows[0], PairComparison):
            w.writerow(WELCH_COLUMNS)
            for c in rows:
                r = c.result
                w.writerow([c.pair[0], c.pair[1], c.label_x, _fmt(c.mean_x), _fmt(c.std_x), c.label_y,
                            _fmt(c.mean_y), _fmt(c.std_y), _fmt(r.t_statistic), _fmt(r.degrees_of_freedom),
                            _fmt(r.p_value)])
        else:
            w.writerow(SIMILARITY_COLUMNS)
            for s in rows:
                for (a, b), v in s.values.items():
                    w.writerow([s.sequence_index, a, b, _fmt(v)])
    return path
