"""Reproducible Monte Carlo plumbing: seeding, sub-streams and batch means."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

N_BATCHES = 100


@dataclass(frozen=True)
class MCResult:
    """Monte Carlo estimate with its batch-means standard error."""

    value: float | np.ndarray
    stderr: float | np.ndarray
    n: int = 0

    def __iter__(self):
        yield self.value
        yield self.stderr


def seed_sequence(rng=None) -> np.random.SeedSequence:
    """Turn an int, ``SeedSequence``, ``Generator`` or ``None`` into a ``SeedSequence``.

    A ``Generator`` is consumed (four 63-bit words are drawn from it), so
    repeated calls with the same generator give different sequences.
    """
    if isinstance(rng, np.random.SeedSequence):
        return rng
    if isinstance(rng, np.random.Generator):
        return np.random.SeedSequence(rng.integers(0, 2**63, size=4).tolist())
    return np.random.SeedSequence(rng)


def spawn_generators(rng, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``rng`` by stream index."""
    return [np.random.default_rng(s) for s in seed_sequence(rng).spawn(n)]


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def parallel_map(fn: Callable, items, threads: int | None = 1) -> list:
    """Ordered map, optionally over a thread pool; output order never depends on scheduling."""
    items = list(items)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def batch_means(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    n: int,
    rng=None,
    n_batches: int = N_BATCHES,
    threads: int | None = 1,
) -> MCResult:
    """Mean of ``sampler`` outputs over ``n`` draws with a batch-means stderr.

    ``sampler(gen, size)`` returns per-draw values with leading dimension
    ``size``. Each batch uses its own sub-stream, so results depend only on
    ``rng`` and ``n`` (not on ``threads``).
    """
    if n < 2:
        raise ValueError("need at least two Monte Carlo draws")
    n_batches = max(2, min(n_batches, n))
    sizes = np.full(n_batches, n // n_batches)
    sizes[: n % n_batches] += 1
    gens = spawn_generators(rng, n_batches)

    def run(i):
        vals = np.asarray(sampler(gens[i], int(sizes[i])), dtype=float)
        return vals.sum(axis=0)

    sums = np.array(parallel_map(run, range(n_batches), threads))
    means = sums / sizes.reshape((-1,) + (1,) * (sums.ndim - 1))
    value = sums.sum(axis=0) / n
    stderr = means.std(axis=0, ddof=1) / np.sqrt(n_batches)
    if np.ndim(value) == 0:
        return MCResult(float(value), float(stderr), n)
    return MCResult(value, stderr, n)
