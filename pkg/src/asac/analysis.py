"""Codebook usage statistics and the two-sample Kolmogorov-Smirnov test.

The KS samples default to per-code frequency vectors: how often each
code fired for a given task.  Per-input code sequences are available
by passing those sequences directly; both are one-dimensional samples
as far as the test is concerned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SampleBatch
from .errors import ContractError
from .model import AsacModel

TERM_FLOOR = 1e-10
MAX_TERMS = 100_000


@dataclass
class UsageHistogram:
    layer: int
    task: int | None
    counts: np.ndarray   # int64 [codebook_size]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def codebook_usage(model: AsacModel, batch: SampleBatch,
                   task_id: int | None = None,
                   batch_size: int = 64) -> list:
    """Tally quantizer code indices per layer over an eval-mode pass."""
    controllers = model.controllers()
    if not controllers:
        raise ContractError("baseline checkpoint has no codebook")
    if task_id is not None and batch.task_ids is not None:
        batch = batch.subset(np.flatnonzero(batch.task_ids == task_id))
    size = model.cfg.codebook_size
    counts = [np.zeros(size, dtype=np.int64) for _ in controllers]
    with T.no_grad():
        for start in range(0, len(batch), batch_size):
            sub = batch.subset(np.arange(start, min(start + batch_size,
                                                    len(batch))))
            out = model.forward(sub.images, sub.task_ids, training=False)
            for i, trace in enumerate(out.traces):
                counts[i] += np.bincount(trace.indices.reshape(-1),
                                         minlength=size)
    return [UsageHistogram(layer=i, task=task_id, counts=c)
            for i, c in enumerate(counts)]


# -- two-sample KS test -----------------------------------------------------------


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Supremum gap between the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ContractError("ks test requires non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_p_value(d: float, n_a: int, n_b: int) -> float:
    """Asymptotic Kolmogorov p-value with small-sample correction.

    lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) * D; the alternating
    series 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2) stops at the first
    term below 1e-10 and the result is clamped to [0, 1].
    """
    if d == 0.0:
        return 1.0
    ne = n_a * n_b / (n_a + n_b)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * d
    # exp(-2 k^2 lam^2) < 1e-10 once k > sqrt(ln(1e10) / 2) / lam
    k_stop = min(int(np.ceil(3.3936 / lam)) + 1, MAX_TERMS)
    k = np.arange(1, k_stop + 1, dtype=np.float64)
    terms = np.exp(-2.0 * (k * lam) ** 2)
    below = np.flatnonzero(terms < TERM_FLOOR)
    if below.size:
        terms = terms[:below[0]]
        k = k[:below[0]]
    signs = np.where(k % 2 == 1, 1.0, -1.0)
    p = 2.0 * float(np.sum(signs * terms))
    return min(1.0, max(0.0, p))


def ks_two_sample(a, b):
    """(D, p) for two one-dimensional samples."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    d = ks_statistic(a, b)
    return d, ks_p_value(d, a.size, b.size)


def pairwise_ks(count_vectors) -> np.ndarray:
    """Symmetric p-value matrix over per-task count vectors."""
    vectors = [np.asarray(getattr(v, "counts", v)) for v in count_vectors]
    if len(vectors) < 2:
        raise ContractError("pairwise ks needs at least two tasks")
    n = len(vectors)
    matrix = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            _, p = ks_two_sample(vectors[i], vectors[j])
            matrix[i, j] = matrix[j, i] = p
    return matrix


# -- json export ------------------------------------------------------------------


def usage_records(histograms) -> list:
    return [{"layer": h.layer, "task": h.task,
             "counts": [int(c) for c in h.counts]} for h in histograms]


def export_usage_json(histograms, path) -> None:
    with open(path, "w") as fh:
        json.dump(usage_records(histograms), fh, indent=2, sort_keys=True)


def load_usage_json(path) -> list:
    with open(path) as fh:
        records = json.load(fh)
    return [UsageHistogram(layer=r["layer"], task=r["task"],
                           counts=np.array(r["counts"], dtype=np.int64))
            for r in records]


def export_matrix_json(matrix: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        json.dump({"matrix": [[float(p) for p in row] for row in matrix]},
                  fh, indent=2)
