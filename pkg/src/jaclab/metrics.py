"""Evaluation statistics: threshold-averaged success, distance buckets,
Jacobian error, conditioning and the J* pinv(J_hat) positive-definiteness check."""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Iterable, Sequence

import numpy as np

from . import linalg


@dataclass(frozen=True)
class ThresholdSpec:
    low: float = 0.001
    high: float = 0.1
    step: float = 0.001

    def __post_init__(self):
        if not (self.low <= self.high and self.step > 0):
            raise ValueError("threshold spec needs low <= high and step > 0")

    def thresholds(self) -> np.ndarray:
        count = int(round((self.high - self.low) / self.step)) + 1
        return np.round(self.low + self.step * np.arange(count), 12)


SINGLE_THRESHOLDS = ThresholdSpec(0.001, 0.1, 0.001)
MULTI_THRESHOLDS = ThresholdSpec(0.001, 0.25, 0.001)


@dataclass(frozen=True)
class BucketSpec:
    edges: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bucket edges must be strictly increasing")

    def labels(self) -> list[str]:
        return [f"{a:g}-{b:g}" for a, b in zip(self.edges, self.edges[1:])]


SINGLE_BUCKETS = BucketSpec((0.0, 0.5, 1.0, 1.5, 2.0))
MULTI_BUCKETS = BucketSpec((0.0, 1.0, 2.0, 3.0, 4.0))
PLANAR_BUCKETS = BucketSpec((0.0, 0.25, 0.5, 0.75, 1.0))


def mean_success(final_distances: Sequence[float], spec: ThresholdSpec = SINGLE_THRESHOLDS) -> float:
    """Success percentage averaged over every threshold in ``spec`` (ties succeed)."""
    d = np.asarray(final_distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no final distances to score")
    th = spec.thresholds()
    return float(100.0 * np.mean(d[None, :] <= th[:, None]))


@dataclass
class Buckets:
    labels: list[str]
    groups: list[list]
    overflow: list

    @property
    def counts(self) -> list[int]:
        return [len(g) for g in self.groups]


def bucketize(items: Iterable, spec: BucketSpec, key=lambda t: t.initial_distance) -> Buckets:
    """Group items into half-open ``[e_i, e_{i+1})`` buckets of initial distance."""
    edges = spec.edges
    groups: list[list] = [[] for _ in range(len(edges) - 1)]
    overflow = []
    for item in items:
        v = key(item)
        for i in range(len(groups)):
            if edges[i] <= v < edges[i + 1]:
                groups[i].append(item)
                break
        else:
            overflow.append(item)
    return Buckets(spec.labels(), groups, overflow)


def frobenius_error(j_true, j_hat) -> float:
    a = np.asarray(j_true, dtype=np.float64)
    b = np.asarray(j_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def pd_criterion(j_true, j_hat) -> bool:
    """Local convergence test: is ``J* pinv(J_hat)`` positive definite?"""
    a = linalg.as_mat(j_true)
    b = linalg.as_mat(j_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return linalg.is_positive_definite(a @ linalg.pinv(b))


def pd_flags_batched(j_true: np.ndarray, j_hat: np.ndarray) -> np.ndarray:
    prod = j_true @ linalg.pinv_batched(j_hat)
    sym = 0.5 * (prod + np.swapaxes(prod, 1, 2))
    return np.linalg.eigvalsh(sym)[:, 0] > linalg.PD_MARGIN


@dataclass
class PdPartition:
    always_pd: list
    not_always_pd: list

    @property
    def percentages(self) -> tuple[float, float]:
        total = len(self.always_pd) + len(self.not_always_pd)
        if total == 0:
            return 0.0, 0.0
        a = 100.0 * len(self.always_pd) / total
        return a, 100.0 - a


def classify_pd_trajectories(traces: Iterable, flags=None) -> PdPartition:
    """Split traces by whether the PD criterion held at every step.

    Each trace needs ``true_jacobians`` and ``jacobians`` sequences, unless
    ``flags`` maps each trace (by position) to precomputed per-step booleans.
    """
    part = PdPartition([], [])
    for i, tr in enumerate(traces):
        if flags is not None:
            ok = bool(np.all(flags[i]))
        else:
            ok = all(pd_criterion(a, b) for a, b in zip(tr.true_jacobians, tr.jacobians))
        (part.always_pd if ok else part.not_always_pd).append(tr)
    return part


@dataclass
class ConditionStats:
    mean: float
    median: float
    stddev: float
    fraction_infinite: float
    log_values: list[float]


def condition_stats(jacobians=None, conds=None) -> ConditionStats:
    """Summary of condition numbers; infinite values only count toward the fraction."""
    if conds is None:
        conds = [linalg.cond(j) for j in jacobians]
    c = np.asarray(conds, dtype=np.float64)
    if c.size == 0:
        raise ValueError("no Jacobians to summarise")
    finite = c[np.isfinite(c)]
    frac_inf = float(1.0 - finite.size / c.size)
    if finite.size == 0:
        return ConditionStats(math.inf, math.inf, math.nan, frac_inf, [])
    return ConditionStats(float(finite.mean()), float(np.median(finite)), float(finite.std()),
                          frac_inf, [float(v) for v in np.log(finite)])


def mean_and_sem(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), sem
