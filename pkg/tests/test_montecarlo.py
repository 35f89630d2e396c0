import math

import numpy as np
import pytest

from critfield.montecarlo import MCResult, batch_means, parallel_map, seed_sequence, spawn_generators


def normal_sampler(gen, size):
    return gen.standard_normal(size)


def test_deterministic_given_seed():
    a = batch_means(normal_sampler, 10_000, rng=5)
    b = batch_means(normal_sampler, 10_000, rng=5)
    assert a == b


def test_independent_of_thread_count():
    a = batch_means(normal_sampler, 10_001, rng=5, threads=1)
    b = batch_means(normal_sampler, 10_001, rng=5, threads=4)
    assert a.value == b.value and a.stderr == b.stderr


def test_stderr_coverage():
    # nominal 95% intervals from the batch-means stderr cover the true mean
    hits = 0
    for seed in range(200):
        res = batch_means(lambda g, n: g.exponential(2.0, n), 5_000, rng=seed)
        hits += abs(res.value - 2.0) < 1.96 * res.stderr
    assert 0.90 <= hits / 200 <= 0.99


def test_stderr_scale():
    res = batch_means(normal_sampler, 100_000, rng=1)
    assert res.stderr == pytest.approx(1 / math.sqrt(100_000), rel=0.3)


def test_vector_valued():
    res = batch_means(lambda g, n: np.column_stack([g.random(n), 2 + g.random(n)]), 20_000, rng=2)
    assert res.value.shape == (2,) and res.stderr.shape == (2,)
    np.testing.assert_allclose(res.value, [0.5, 2.5], atol=4 * res.stderr.max())


def test_uneven_batches_use_all_draws():
    res = batch_means(lambda g, n: np.ones(n), 1_037, rng=0)
    assert res.value == 1.0 and res.stderr == 0.0 and res.n == 1_037


def test_too_few_draws():
    with pytest.raises(ValueError):
        batch_means(normal_sampler, 1)


def test_result_unpacks():
    value, stderr = MCResult(1.0, 0.1)
    assert (value, stderr) == (1.0, 0.1)


def test_seed_sequence_inputs():
    assert seed_sequence(3).entropy == 3
    ss = np.random.SeedSequence(9)
    assert seed_sequence(ss) is ss
    gen = np.random.default_rng(0)
    assert seed_sequence(gen).entropy != seed_sequence(gen).entropy


def test_spawned_streams_differ():
    gens = spawn_generators(1, 3)
    draws = [g.random() for g in gens]
    assert len(set(draws)) == 3
    again = [g.random() for g in spawn_generators(1, 3)]
    assert draws == again


def test_parallel_map_preserves_order():
    assert parallel_map(lambda x: x * x, range(20), threads=4) == [x * x for x in range(20)]
    assert parallel_map(lambda x: -x, [3], threads=None) == [-3]
