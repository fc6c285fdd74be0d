"""Shared oracles and random-model factories for the test suite.

The oracles deliberately avoid the code paths they judge: matrix
exponentials come from plain Taylor summation with squaring, densities
from quadrature of closed-form integrands.
"""

import math

import numpy as np

from flashsim.model import FlashModel, Lattice, RateOperatorFamily


def taylor_expm(a: np.ndarray, terms: int = 30) -> np.ndarray:
    """exp(a) by Taylor series after scaling to norm ~0.05, then squaring.

    Few squarings keep round-off amplification below ~1e-13; the series
    itself converges far past double precision at that norm.
    """
    a = np.asarray(a, dtype=np.complex128)
    norm = float(np.linalg.norm(a, 1))
    splits = max(0, math.ceil(math.log2(max(norm, 1e-30) / 0.05)))
    a = a / float(2**splits)
    d = a.shape[0]
    acc = np.eye(d, dtype=np.complex128)
    term = np.eye(d, dtype=np.complex128)
    for k in range(1, terms + 1):
        term = term @ a / k
        acc = acc + term
    for _ in range(splits):
        acc = acc @ acc
    return acc


def random_hermitian(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (a + a.conj().T) / 2.0


def random_psd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (a @ a.conj().T) / d


def random_state(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    return v / np.linalg.norm(v)


def random_custom_model(
    rng: np.random.Generator,
    dim: int,
    n_labels: int = 1,
    n_sites: int = 2,
    rate_scale: float = 1.0,
    h_scale: float = 1.0,
) -> FlashModel:
    """Arbitrary valid model: random PSD rate operators, random Hamiltonian."""
    ops = np.empty((n_labels, n_sites, dim, dim), dtype=np.complex128)
    for i in range(n_labels):
        for m in range(n_sites):
            ops[i, m] = random_psd(rng, dim, rate_scale / n_sites)
    family = RateOperatorFamily(labels=tuple(f"r{i}" for i in range(n_labels)), ops=ops)
    return FlashModel(
        lattice=Lattice(shape=(n_sites,), spacing=1.0),
        hamiltonian=random_hermitian(rng, dim, h_scale),
        rates=family,
    )
