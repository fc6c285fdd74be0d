"""Matrix building blocks checked against slow independent routes."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashsim import linalg
from flashsim.errors import (
    DimensionOverflowError,
    EmptySectorError,
    ExponentOverflowError,
    NotHermitianError,
    NotPositiveError,
)

from helpers import random_hermitian, random_psd, taylor_expm


def test_require_hermitian_symmetrizes_and_rejects():
    rng = np.random.default_rng(0)
    h = random_hermitian(rng, 4)
    out = linalg.require_hermitian(h + 1e-14 * rng.normal(size=(4, 4)))
    assert np.array_equal(out, out.conj().T)
    with pytest.raises(NotHermitianError):
        linalg.require_hermitian(h + 0.1 * 1j * np.eye(4) @ np.diag([1, 0, 0, 0]))


def test_hermitian_sqrt_squares_back():
    rng = np.random.default_rng(1)
    for d in (1, 2, 5, 8):
        a = random_psd(rng, d)
        b = linalg.hermitian_sqrt(a)
        assert np.allclose(b @ b, a, atol=1e-12)
        assert np.allclose(b, b.conj().T, atol=1e-14)
        assert np.linalg.eigvalsh(b)[0] >= -1e-13


def test_hermitian_sqrt_rejects_indefinite():
    with pytest.raises(NotPositiveError):
        linalg.hermitian_sqrt(np.diag([1.0, -0.5]))


def test_hermitian_sqrt_clips_tiny_negative_eigenvalues():
    a = np.diag([1.0, -1e-12])
    b = linalg.hermitian_sqrt(a)
    assert np.linalg.eigvalsh(b)[0] >= 0.0


def test_semigroup_exp_against_taylor():
    rng = np.random.default_rng(2)
    for d in (2, 4, 7):
        lam = random_psd(rng, d)
        h = random_hermitian(rng, d)
        g = -0.5 * lam - 1j * h
        for t in (0.0, 0.3, 1.7):
            ref = taylor_expm(g * t)
            got = linalg.semigroup_exp(g, t)
            assert np.max(np.abs(got - ref)) < 1e-12


def test_semigroup_exp_semigroup_property():
    rng = np.random.default_rng(3)
    g = -0.5 * random_psd(rng, 5) - 1j * random_hermitian(rng, 5)
    w1 = linalg.semigroup_exp(g, 0.4)
    w2 = linalg.semigroup_exp(g, 1.1)
    w3 = linalg.semigroup_exp(g, 1.5)
    assert np.max(np.abs(w2 @ w1 - w3)) < 1e-12


def test_semigroup_exp_overflow_guard():
    g = np.array([[50.0]])
    with pytest.raises(ExponentOverflowError):
        linalg.semigroup_exp(g, 1e3)


def test_tensor_and_direct_sum():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 1.0], [1.0, 0.0]])
    t = linalg.tensor(a, b)
    assert t.shape == (4, 4)
    assert np.allclose(t[:2, :2], a[0, 0] * b)
    s = linalg.direct_sum(a, b)
    assert s.shape == (4, 4)
    assert np.allclose(s[:2, :2], a)
    assert np.allclose(s[2:, 2:], b)
    assert np.allclose(s[:2, 2:], 0)


def test_tensor_dimension_cap():
    a = np.eye(300)
    with pytest.raises(DimensionOverflowError):
        linalg.tensor(a, a)


@st.composite
def permutations(draw, max_n=5):
    n = draw(st.integers(min_value=1, max_value=max_n))
    return tuple(draw(st.permutations(range(n))))


@given(p1=permutations(), p2=permutations())
@settings(max_examples=60, deadline=None)
def test_permutation_group_laws(p1, p2):
    s1 = linalg.PermutationSpec(p1)
    assert s1.compose(s1.inverse()).mapping == tuple(range(len(p1)))
    assert s1.sign() * s1.inverse().sign() == 1
    if len(p1) == len(p2):
        s2 = linalg.PermutationSpec(p2)
        s12 = s1.compose(s2)
        assert s12.sign() == s1.sign() * s2.sign()


def test_permutation_operator_action_on_product_basis():
    # (U psi)(i_1..i_n) = psi(i_s(1)..i_s(n)) sends a product vector to the
    # product with factor s^-1(m) at slot m
    d, n = 3, 3
    spec = linalg.PermutationSpec((1, 2, 0))
    u = linalg.permutation_operator(spec, d)
    rng = np.random.default_rng(4)
    vecs = [rng.normal(size=d) + 1j * rng.normal(size=d) for _ in range(n)]
    prod = vecs[0]
    for v in vecs[1:]:
        prod = np.kron(prod, v)
    inv = spec.inverse().mapping
    permuted = vecs[inv[0]]
    for k in range(1, n):
        permuted = np.kron(permuted, vecs[inv[k]])
    assert np.allclose(u @ prod, permuted, atol=1e-12)


def test_permutation_operator_composition():
    d = 2
    s1 = linalg.PermutationSpec((2, 0, 1))
    s2 = linalg.PermutationSpec((1, 0, 2))
    u = linalg.permutation_operator(s1.compose(s2), d)
    assert np.allclose(
        u, linalg.permutation_operator(s1, d) @ linalg.permutation_operator(s2, d), atol=1e-14
    )


@pytest.mark.parametrize("d,n,parity", [(2, 2, 1), (2, 2, -1), (3, 2, 1), (3, 3, -1), (2, 3, 1)])
def test_sector_projector_is_projector(d, n, parity):
    p = linalg.sector_projector(d, n, parity)
    assert np.allclose(p @ p, p, atol=1e-12)
    assert np.allclose(p, p.conj().T, atol=1e-12)
    expected_rank = math.comb(d + n - 1, n) if parity > 0 else math.comb(d, n)
    assert abs(np.trace(p).real - expected_rank) < 1e-9


def test_sector_projector_empty_fermion_sector():
    p = linalg.sector_projector(2, 3, -1)
    assert np.allclose(p, 0)


def test_occupations_order():
    occ = linalg.occupations(2, 2)
    assert occ == [(2, 0), (1, 1), (0, 2)]
    occ3 = linalg.occupations(3, 2, max_occ=1)
    assert occ3 == [(1, 1, 0), (1, 0, 1), (0, 1, 1)]


@pytest.mark.parametrize("d,n,parity", [(2, 2, 1), (3, 2, -1), (3, 2, 1), (4, 3, -1)])
def test_sector_basis_orthonormal_and_spans_projector(d, n, parity):
    q, occs = linalg.sector_basis(d, n, parity)
    dim = q.shape[1]
    assert len(occs) == dim
    assert np.allclose(q.conj().T @ q, np.eye(dim), atol=1e-12)
    p = linalg.sector_projector(d, n, parity)
    assert np.allclose(q @ q.conj().T, p, atol=1e-12)
    for occ in occs:
        assert sum(occ) == n
        assert len(occ) == d


def test_sector_basis_empty_fermion_sector():
    with pytest.raises(EmptySectorError):
        linalg.sector_basis(2, 3, -1)


def test_partial_trace():
    rng = np.random.default_rng(5)
    a = random_psd(rng, 3)
    b = random_psd(rng, 4)
    rho = np.kron(a, b)
    assert np.allclose(linalg.partial_trace(rho, (3, 4), keep=0), a * np.trace(b), atol=1e-12)
    assert np.allclose(linalg.partial_trace(rho, (3, 4), keep=1), b * np.trace(a), atol=1e-12)


def test_trace_distance():
    e0 = np.diag([1.0, 0.0])
    e1 = np.diag([0.0, 1.0])
    assert linalg.trace_distance(e0, e0) < 1e-14
    assert abs(linalg.trace_distance(e0, e1) - 1.0) < 1e-12


def test_fermion_antisymmetry_under_swap():
    d = 3
    q, _ = linalg.sector_basis(d, 2, -1)
    u = linalg.permutation_operator(linalg.PermutationSpec((1, 0)), d)
    for k in range(q.shape[1]):
        assert np.allclose(u @ q[:, k], -q[:, k], atol=1e-12)


def test_boson_symmetry_under_all_permutations():
    d = 2
    q, _ = linalg.sector_basis(d, 3, 1)
    for perm in itertools.permutations(range(3)):
        u = linalg.permutation_operator(linalg.PermutationSpec(perm), d)
        assert np.allclose(u @ q, q, atol=1e-12)
