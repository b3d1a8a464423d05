import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy import special, stats

from cmivf.errors import DimensionMismatch, DomainError, ZeroVector
from cmivf.vecspace import (
    EmbeddingSet,
    cap_fraction,
    derive_seed,
    exact_nn,
    l2_normalize,
    make_rng,
    reg_inc_beta,
    sample_gaussian,
    sample_uniform_sphere,
)

from conftest import brute_force_nn


# ---------------------------------------------------------------- EmbeddingSet

def test_embedding_set_validation():
    with pytest.raises(DomainError):
        EmbeddingSet(np.zeros((0, 4)))
    with pytest.raises(DomainError):
        EmbeddingSet(np.zeros((3, 1)))
    with pytest.raises(DomainError):
        EmbeddingSet(np.array([[1.0, np.nan]]))
    with pytest.raises(DomainError):
        EmbeddingSet(np.array([[1.0, 1.0]]), normalized=True)
    e = EmbeddingSet(np.array([[1.0, 0.0], [0.0, 1.0]]), normalized=True)
    assert e.data.dtype == np.float32 and (e.n, e.d) == (2, 2)
    assert e.take([1]).data.tolist() == [[0.0, 1.0]]


# ---------------------------------------------------------------- normalization

def test_l2_normalize_examples():
    out = l2_normalize(np.array([[3.0, 4.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8], [1.0, 0.0]], atol=1e-7)
    assert out.normalized


def test_l2_normalize_random_norms(rng):
    out = l2_normalize(rng.standard_normal((100, 64)))
    np.testing.assert_allclose(np.linalg.norm(out.data.astype(np.float64), axis=1), 1.0, atol=1e-6)


def test_l2_normalize_zero_row():
    with pytest.raises(ZeroVector):
        l2_normalize(np.array([[1.0, 0.0], [0.0, 0.0]]))


# ---------------------------------------------------------------- exact search

def test_exact_nn_hand_example():
    res = exact_nn(np.array([[1.0, 0.0]]), np.array([[0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]]), 1)
    assert res.ids[0, 0] == 0


def test_exact_nn_self_and_permutation(rng):
    g = rng.standard_normal((50, 8)).astype(np.float32)
    res = exact_nn(g[7:8], g, 50)
    assert res.ids[0, 0] == 7
    assert sorted(res.ids[0].tolist()) == list(range(50))
    assert np.all(np.diff(res.dists[0]) >= 0)


def test_exact_nn_ties_to_lower_id():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert exact_nn(q, g, 1).ids[:, 0].tolist() == [0, 1, 0]
    assert exact_nn(q, g, 4).ids[2].tolist() == [0, 1, 2, 3]


def test_exact_nn_errors(rng):
    with pytest.raises(DimensionMismatch):
        exact_nn(rng.standard_normal((2, 3)), rng.standard_normal((5, 4)), 1)
    with pytest.raises(DomainError):
        exact_nn(rng.standard_normal((2, 3)), rng.standard_normal((5, 3)), 6)


def test_exact_nn_matches_oracle_1000_instances():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n, d, nq = int(rng.integers(1, 200)), int(rng.integers(2, 17)), int(rng.integers(1, 6))
        topk = int(rng.integers(1, n + 1))
        g = rng.standard_normal((n, d)).astype(np.float32)
        if n > 3 and rng.random() < 0.2:
            g[n // 2] = g[0]  # exact duplicate: exercises the tie rule
        q = rng.standard_normal((nq, d)).astype(np.float32)
        got = exact_nn(q, g, topk).ids
        np.testing.assert_array_equal(got, brute_force_nn(q, g, topk))


@given(st.integers(1, 40), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_exact_nn_property(n, d, seed):
    r = np.random.default_rng(seed)
    g = r.integers(-2, 3, size=(n, d)).astype(np.float32)  # small integers: many ties
    q = r.integers(-2, 3, size=(3, d)).astype(np.float32)
    np.testing.assert_array_equal(exact_nn(q, g, n).ids, brute_force_nn(q, g, n))


# ---------------------------------------------------------------- special functions

def test_reg_inc_beta_examples():
    for a, b in [(0.5, 0.5), (3.0, 0.5), (20.0, 7.0)]:
        assert reg_inc_beta(1.0, a, b) == 1.0
        assert reg_inc_beta(0.0, a, b) == 0.0
    for x in np.linspace(0, 1, 11):
        assert abs(reg_inc_beta(float(x), 1.0, 1.0) - x) < 1e-12
    assert abs(reg_inc_beta(0.5, 0.5, 0.5) - 0.5) < 1e-12


def test_reg_inc_beta_against_scipy():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        x = float(rng.random())
        a, b = float(rng.uniform(0.05, 80)), float(rng.uniform(0.05, 80))
        assert abs(reg_inc_beta(x, a, b) - special.betainc(a, b, x)) < 1e-10


@given(st.floats(0, 1), st.floats(0.1, 50), st.floats(0.1, 50))
def test_reg_inc_beta_reflection(x, a, b):
    # the identity relates x and 1 - x; skip x where 1 - x is not exactly representable
    assume(1.0 - (1.0 - x) == x)
    assert abs(reg_inc_beta(x, a, b) - (1 - reg_inc_beta(1 - x, b, a))) < 1e-9


@pytest.mark.parametrize("args", [(-0.1, 1, 1), (1.1, 1, 1), (0.5, 0, 1), (0.5, 1, -2), (float("nan"), 1, 1)])
def test_reg_inc_beta_domain(args):
    with pytest.raises(DomainError):
        reg_inc_beta(*args)


def test_cap_fraction_examples():
    for d in (2, 3, 16, 128):
        assert cap_fraction(1.0, d) == 0.0
        assert abs(cap_fraction(0.0, d) - 0.5) < 1e-12
    assert abs(cap_fraction(0.5, 3) - 0.25) < 1e-12
    for s in np.linspace(0, 1, 101):
        assert abs(cap_fraction(float(s), 3) - (1 - s) / 2) < 1e-9


def test_cap_fraction_negative_symmetry_and_errors():
    for d in (3, 16):
        for s in (0.1, 0.4, 0.9):
            assert abs(cap_fraction(-s, d) - (1 - cap_fraction(s, d))) < 1e-12
    with pytest.raises(DomainError):
        cap_fraction(1.5, 3)
    with pytest.raises(DomainError):
        cap_fraction(0.5, 1)


def test_cap_fraction_circle_closed_form():
    # on the circle the cap of cosine s is an arc of half-angle arccos(s)
    for s in (0.1, 0.5, 0.9):
        assert abs(cap_fraction(s, 2) - math.acos(s) / math.pi) < 1e-10


@pytest.mark.parametrize("d", [2, 5, 16, 64])
def test_cap_fraction_monotone(d):
    vals = [cap_fraction(float(s), d) for s in np.arange(0, 1.0005, 1e-3)]
    assert np.all(np.diff(vals) <= 1e-15)


# ---------------------------------------------------------------- samplers

def test_sample_uniform_sphere():
    x = sample_uniform_sphere(1_000_000, 16, 11)
    assert x.normalized
    np.testing.assert_allclose(np.linalg.norm(x.data[:1000].astype(np.float64), axis=1), 1.0, atol=1e-6)
    frac = float(np.mean(x.data[:, 0] >= 0.3))
    assert abs(frac - cap_fraction(0.3, 16)) < 0.005
    np.testing.assert_array_equal(sample_uniform_sphere(100, 16, 11).data, x.data[:100])


def test_sample_gaussian():
    x = sample_gaussian(1_000_000, 4, 5).data.astype(np.float64)
    assert np.all(np.abs(x.mean(axis=0)) < 0.01)
    assert np.all(np.abs(x.var(axis=0) - 1) < 0.01)
    r = sample_gaussian(1_000_000, 2, 6).data.astype(np.float64)
    assert abs(np.mean(np.sum(r**2, axis=1) <= 1) - (1 - math.exp(-0.5))) < 0.005
    np.testing.assert_array_equal(sample_gaussian(10, 4, 5).data, sample_gaussian(10, 4, 5).data)
    assert not sample_gaussian(10, 4, 5).normalized


def test_rng_streams():
    a = make_rng(1, 2).standard_normal(5)
    np.testing.assert_array_equal(a, make_rng(1, 2).standard_normal(5))
    assert not np.array_equal(a, make_rng(1, 3).standard_normal(5))
    assert derive_seed(4, 1) == derive_seed(4, 1) != derive_seed(4, 2)
    with pytest.raises(DomainError):
        make_rng(-1)
