"""Dense complex operator algebra on finite-dimensional spaces.

Everything works on plain complex128 ndarrays. Operators that must be
Hermitian or positive are validated against explicit tolerances rather than
trusted, since downstream square roots and semigroups amplify violations.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
import scipy.linalg

from .errors import (
    DimensionOverflowError,
    EmptySectorError,
    ExponentOverflowError,
    NotHermitianError,
    NotPositiveError,
)

HERMITICITY_TOL = 1e-12
POSITIVITY_TOL = 1e-10
DIM_CAP = 65536

# Accuracy statement for semigroup_exp holds comfortably up to ||G t|| ~ 100;
# beyond EXP_NORM_BOUND the scaling/squaring error and overflow risk are no
# longer vouched for, so callers must split the interval themselves.
EXP_NORM_BOUND = 1000.0


def as_complex_matrix(a) -> np.ndarray:
    """Coerce to a square, finite complex128 matrix."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m.view(np.float64))):
        raise ValueError("matrix has non-finite entries")
    return m


def hermiticity_defect(a: np.ndarray) -> float:
    return float(np.max(np.abs(a - a.conj().T), initial=0.0))


def require_hermitian(a, tol: float = HERMITICITY_TOL) -> np.ndarray:
    m = as_complex_matrix(a)
    defect = hermiticity_defect(m)
    scale = max(1.0, float(np.max(np.abs(m), initial=0.0)))
    if defect > tol * scale:
        raise NotHermitianError(f"hermiticity defect {defect:.3e} exceeds {tol:.1e} * {scale:.3e}")
    return 0.5 * (m + m.conj().T)


def hermitian_sqrt(a, herm_tol: float = HERMITICITY_TOL, psd_tol: float = POSITIVITY_TOL) -> np.ndarray:
    """Positive square root of a positive semidefinite matrix.

    Eigenvalues in [-psd_tol, 0) are treated as round-off and clipped to 0;
    anything lower raises NotPositiveError.
    """
    m = require_hermitian(a, herm_tol)
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(w[-1]) if w.size else 1.0)
    if w.size and w[0] < -psd_tol * scale:
        raise NotPositiveError(f"eigenvalue {w[0]:.3e} below -{psd_tol:.1e} * {scale:.3e}")
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.conj().T
    return 0.5 * (root + root.conj().T)


def semigroup_exp(g, t: float, norm_bound: float = EXP_NORM_BOUND) -> np.ndarray:
    """Matrix exponential e^{g t} for a general complex generator.

    Raises ExponentOverflowError when ||g||_1 * |t| exceeds norm_bound; split
    the interval and use the semigroup property instead.
    """
    m = as_complex_matrix(g)
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    size = float(np.linalg.norm(m, 1)) * abs(t)
    if size > norm_bound:
        raise ExponentOverflowError(f"||G||_1 * |t| = {size:.3e} exceeds bound {norm_bound:.3e}")
    out = scipy.linalg.expm(m * t)
    if not np.all(np.isfinite(out.view(np.float64))):
        raise ExponentOverflowError("matrix exponential produced non-finite entries")
    return out


def _check_product_dim(*dims: int, cap: int = DIM_CAP) -> int:
    total = 1
    for d in dims:
        total *= int(d)
    if total > cap:
        raise DimensionOverflowError(f"product dimension {total} exceeds cap {cap}")
    return total


def tensor(a, b, cap: int = DIM_CAP) -> np.ndarray:
    """Kronecker product with the dimension cap enforced."""
    ma, mb = as_complex_matrix(a), as_complex_matrix(b)
    _check_product_dim(ma.shape[0], mb.shape[0], cap=cap)
    return np.kron(ma, mb)


def direct_sum(a, b) -> np.ndarray:
    ma, mb = as_complex_matrix(a), as_complex_matrix(b)
    da, db = ma.shape[0], mb.shape[0]
    out = np.zeros((da + db, da + db), dtype=np.complex128)
    out[:da, :da] = ma
    out[da:, da:] = mb
    return out


@dataclass(frozen=True)
class PermutationSpec:
    """A permutation of tensor factors, given as the image tuple.

    mapping[k] = sigma(k), zero-based: output slot k carries input factor
    sigma(k).
    """

    mapping: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(x) for x in self.mapping))
        n = len(self.mapping)
        if sorted(self.mapping) != list(range(n)):
            raise ValueError(f"mapping {self.mapping} is not a permutation of 0..{n - 1}")

    @property
    def n_factors(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "PermutationSpec":
        inv = [0] * self.n_factors
        for k, s in enumerate(self.mapping):
            inv[s] = k
        return PermutationSpec(tuple(inv))

    def compose(self, other: "PermutationSpec") -> "PermutationSpec":
        """(self o other)(k) = self.mapping[other.mapping[k]]."""
        if other.n_factors != self.n_factors:
            raise ValueError("factor counts differ")
        return PermutationSpec(tuple(self.mapping[other.mapping[k]] for k in range(self.n_factors)))

    def sign(self) -> int:
        seen = [False] * self.n_factors
        sign = 1
        for start in range(self.n_factors):
            if seen[start]:
                continue
            length = 0
            k = start
            while not seen[k]:
                seen[k] = True
                k = self.mapping[k]
                length += 1
            if length % 2 == 0:
                sign = -sign
        return sign


def permutation_operator(spec: PermutationSpec, d: int, cap: int = DIM_CAP) -> np.ndarray:
    """Unitary permuting tensor factors of (C^d)^(x n).

    Convention: (U psi)(i_1..i_n) = psi(i_{sigma(1)}..i_{sigma(n)}), so
    U e_j = e_{j o sigma^{-1}} on product basis vectors and
    permutation_operator(s1) @ permutation_operator(s2) realises s1 o s2.
    """
    n = spec.n_factors
    dim = _check_product_dim(*([d] * n), cap=cap)
    idx = np.indices((d,) * n).reshape(n, dim)
    inv = spec.inverse().mapping
    cols = np.ravel_multi_index(tuple(idx[inv[k]] for k in range(n)), (d,) * n)
    op = np.zeros((dim, dim), dtype=np.complex128)
    op[cols, np.arange(dim)] = 1.0
    return op


def sector_projector(d: int, n_factors: int, parity: int, cap: int = DIM_CAP) -> np.ndarray:
    """Orthogonal projector onto the symmetric (+1) or antisymmetric (-1) sector."""
    if parity not in (1, -1):
        raise ValueError("parity must be +1 or -1")
    dim = _check_product_dim(*([d] * n_factors), cap=cap)
    if parity == -1 and n_factors > d:
        # antisymmetriser annihilates everything; skip the sum
        return np.zeros((dim, dim), dtype=np.complex128)
    proj = np.zeros((dim, dim), dtype=np.complex128)
    count = 0
    for perm in permutations(range(n_factors)):
        spec = PermutationSpec(perm)
        weight = 1.0 if parity == 1 else float(spec.sign())
        proj += weight * permutation_operator(spec, d, cap=cap)
        count += 1
    return proj / count


def occupations(n_sites: int, total: int, max_occ: int | None = None) -> list[tuple[int, ...]]:
    """All occupation tuples over n_sites summing to total, first site slowest.

    Canonical order: first entry descending, then recursively the same on the
    remaining sites, e.g. (2,0), (1,1), (0,2).
    """
    if n_sites == 0:
        return [()] if total == 0 else []
    cap = total if max_occ is None else min(total, max_occ)
    out = []
    for head in range(cap, -1, -1):
        for tail in occupations(n_sites - 1, total - head, max_occ):
            out.append((head,) + tail)
    return out


def sector_basis(d: int, n_factors: int, parity: int, cap: int = DIM_CAP) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Orthonormal basis of the symmetric/antisymmetric sector of (C^d)^(x n).

    Returns (Q, occs) with Q of shape (d**n, sector_dim); column j is the
    normalised (anti)symmetrisation of the product state with occupation
    occs[j], listed in the canonical occupation order. Q^dagger A Q restricts
    an operator to the sector.
    """
    if parity not in (1, -1):
        raise ValueError("parity must be +1 or -1")
    dim = _check_product_dim(*([d] * n_factors), cap=cap)
    if n_factors == 0:
        return np.ones((1, 1), dtype=np.complex128), [()]
    occs = occupations(d, n_factors, max_occ=1 if parity == -1 else None)
    if not occs:
        raise EmptySectorError(f"antisymmetric sector of {n_factors} factors on dimension {d} is empty")
    cols = np.zeros((dim, len(occs)), dtype=np.complex128)
    shape = (d,) * n_factors
    for j, occ in enumerate(occs):
        rep = tuple(site for site in range(d) for _ in range(occ[site]))
        vec = np.zeros(dim, dtype=np.complex128)
        for perm in permutations(range(n_factors)):
            spec = PermutationSpec(perm)
            weight = 1.0 if parity == 1 else float(spec.sign())
            target = tuple(rep[spec.mapping[k]] for k in range(n_factors))
            vec[np.ravel_multi_index(target, shape)] += weight
        cols[:, j] = vec / np.linalg.norm(vec)
    return cols, occs


def partial_trace(rho: np.ndarray, dims: tuple[int, int], keep: int) -> np.ndarray:
    """Trace out one factor of a bipartite density matrix."""
    d1, d2 = dims
    m = as_complex_matrix(rho).reshape(d1, d2, d1, d2)
    if keep == 0:
        return np.trace(m, axis1=1, axis2=3)
    if keep == 1:
        return np.trace(m, axis1=0, axis2=2)
    raise ValueError("keep must be 0 or 1")


def trace_distance(a, b) -> float:
    """(1/2)||a - b||_1 for Hermitian a, b."""
    diff = require_hermitian(as_complex_matrix(a) - as_complex_matrix(b), tol=np.inf)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(diff))))
