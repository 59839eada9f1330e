import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stprobe.numerics import (
    NonFiniteError, Rng64, check_finite, choose_k, fisher_yates, fisher_yates_head_rows,
    fisher_yates_rows, matmul, rng_below, rng_next,
)

M64 = (1 << 64) - 1


def oracle_splitmix(seed, count):
    """Straight transcription of the reference splitmix64 step."""
    x = seed & M64
    out = []
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) & M64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix_golden_first_output():
    assert rng_next(Rng64(0)) == 0xE220A8397B1DCDAF
    assert oracle_splitmix(0, 1)[0] == 0xE220A8397B1DCDAF


def test_splitmix_frozen_stream():
    r = Rng64(0)
    got = [rng_next(r) for _ in range(3)]
    assert got == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@given(st.integers(0, M64), st.integers(1, 40))
@settings(max_examples=50, deadline=None)
def test_scalar_and_bulk_match_oracle(seed, count):
    expect = oracle_splitmix(seed, count)
    r = Rng64(seed)
    assert [r.next() for _ in range(count)] == expect
    b = Rng64(seed)
    assert b.bulk(count).tolist() == expect
    assert b.state == r.state


def test_skip_equals_discarding():
    a, b = Rng64(7), Rng64(7)
    for _ in range(13):
        a.next()
    b.skip(13)
    assert a.next() == b.next()


def test_uniform_in_unit_interval():
    u = Rng64(3).uniform((1000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.05


def test_rng_below_rules():
    r = Rng64(1)
    assert rng_below(r, 1) == 0
    with pytest.raises(ValueError):
        rng_below(r, 0)
    r1, r2 = Rng64(99), Rng64(99)
    assert rng_below(r1, 10) == (r2.next() >> 11) % 10


def test_fisher_yates_is_permutation_and_deterministic():
    p = fisher_yates(Rng64(5), 50)
    assert sorted(p.tolist()) == list(range(50))
    assert np.array_equal(p, fisher_yates(Rng64(5), 50))
    assert fisher_yates(Rng64(5), 1).tolist() == [0]
    with pytest.raises(ValueError):
        fisher_yates(Rng64(5), 0)


def test_fisher_yates_uniform_over_permutations_of_three():
    r = Rng64(12345)
    trials = 60_000
    counts = {}
    for _ in range(trials):
        key = tuple(fisher_yates(r, 3).tolist())
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    p = 1 / 6
    sigma = np.sqrt(trials * p * (1 - p))
    for c in counts.values():
        assert abs(c - trials * p) < 5 * sigma


def test_choose_k():
    picks = choose_k(Rng64(0), 100, 9)
    assert len(set(picks.tolist())) == 9
    assert np.all(np.diff(picks) > 0)
    assert choose_k(Rng64(0), 5, 5).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        choose_k(Rng64(0), 3, 4)


@given(st.integers(0, 2**32), st.integers(2, 40), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_vectorized_fisher_yates_matches_scalar(seed, n, rows):
    r = Rng64(seed)
    draws = r.bulk(rows * (n - 1)).reshape(rows, n - 1)
    full = fisher_yates_rows(draws, n)
    head = fisher_yates_head_rows(draws, n, min(n, 9))
    assert np.array_equal(fisher_yates_head_rows(draws.T.copy(), n, min(n, 9), transposed=True),
                          head)
    r = Rng64(seed)
    for row in range(rows):
        expect = fisher_yates(r, n)
        assert np.array_equal(full[row], expect)
        assert np.array_equal(head[row], expect[: min(n, 9)])


def test_matmul_checks():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(a, np.eye(3)), a)
    with pytest.raises(ValueError):
        matmul(a, np.eye(2))
    with pytest.raises(NonFiniteError):
        matmul(np.array([[np.inf]]), np.array([[0.0]]))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
