"""Flash-process models: rate-operator families plus Hamiltonian dynamics.

A model bundles a lattice, a labelled family of positive rate operators
Lambda_label(site), a Hermitian Hamiltonian, and the derived no-flash
generator G = -(1/2) Lambda_total - i H. Builders cover distinguishable
particles on a product space, (anti)symmetrised identical particles, and a
truncated number-graded field space; composition covers tensor products,
direct sums of alternatives, and site-support relabelling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import linalg
from .errors import (
    BadProfileError,
    DimensionOverflowError,
    EmptySectorError,
    LatticeMismatchError,
    NegativeTimeError,
    NonMonotoneHistoryError,
    NotHermitianError,
    NotNormalizedError,
    NotPositiveError,
    ZeroNormError,
    ZeroProbabilityFlashError,
)

NORMALIZATION_TOL = 1e-8
# relative cutoff below which Gaussian tail weights are zeroed
WEIGHT_TRUNCATION = 1e-14
# propagate() splits long intervals so each exponential stays well inside
# the accuracy region of linalg.semigroup_exp
PROPAGATE_CHUNK_NORM = 100.0


@dataclass(frozen=True)
class Lattice:
    """Periodic rectangular lattice; site index is row-major over shape."""

    shape: tuple[int, ...]
    spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if len(self.shape) not in (1, 2, 3):
            raise ValueError(f"lattice must have 1..3 axes, got {self.shape}")
        if any(n < 1 for n in self.shape):
            raise ValueError(f"lattice axes must be positive, got {self.shape}")
        if not (math.isfinite(self.spacing) and self.spacing > 0):
            raise ValueError(f"lattice spacing must be positive, got {self.spacing}")

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def site_index_tuples(self) -> np.ndarray:
        """(n_sites, ndim) integer coordinates in row-major site order."""
        return np.indices(self.shape).reshape(self.ndim, self.n_sites).T

    def site_position(self, m: int) -> tuple[float, ...]:
        idx = np.unravel_index(m, self.shape)
        return tuple(float(i) * self.spacing for i in idx)

    def pairwise_dist2(self) -> np.ndarray:
        """(n_sites, n_sites) squared minimal-image distances."""
        return _pairwise_dist2(self.shape, self.spacing)


@lru_cache(maxsize=64)
def _pairwise_dist2(shape: tuple[int, ...], spacing: float) -> np.ndarray:
    coords = np.indices(shape).reshape(len(shape), int(np.prod(shape))).T
    delta = np.abs(coords[:, None, :] - coords[None, :, :])
    period = np.array(shape)[None, None, :]
    delta = np.minimum(delta, period - delta) * spacing
    out = np.sum(delta.astype(np.float64) ** 2, axis=2)
    out.flags.writeable = False
    return out


def _check_positive_param(name: str, value: float) -> float:
    value = float(value)
    if not (math.isfinite(value) and value > 0):
        raise BadProfileError(f"{name} must be strictly positive and finite, got {value}")
    return value


@dataclass(frozen=True)
class GaussianProfile:
    """Gaussian rate profile: weight(m, r) = strength * exp(-d(m,r)^2 / width^2)."""

    strength: float
    width: float

    def __post_init__(self):
        _check_positive_param("strength", self.strength)
        _check_positive_param("width", self.width)

    def weight_matrix(self, lattice: Lattice) -> np.ndarray:
        w = self.strength * np.exp(-lattice.pairwise_dist2() / self.width**2)
        w[w < WEIGHT_TRUNCATION * w.max()] = 0.0
        return w


@dataclass(frozen=True)
class DeltaProfile:
    """On-site rate profile: weight(m, r) = strength * [m == r]."""

    strength: float

    def __post_init__(self):
        _check_positive_param("strength", self.strength)

    def weight_matrix(self, lattice: Lattice) -> np.ndarray:
        return self.strength * np.eye(lattice.n_sites)


RateProfile = GaussianProfile | DeltaProfile


@dataclass(eq=False)
class RateOperatorFamily:
    """Positive operators Lambda_label(site), stored as ops[label, site]."""

    labels: tuple[str, ...]
    ops: np.ndarray  # (n_labels, n_sites, dim, dim) complex128

    def __post_init__(self):
        self.labels = tuple(str(l) for l in self.labels)
        self.ops = np.ascontiguousarray(self.ops, dtype=np.complex128)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in {self.labels}")
        if self.ops.ndim != 4 or self.ops.shape[2] != self.ops.shape[3]:
            raise ValueError(f"ops must have shape (n_labels, n_sites, d, d), got {self.ops.shape}")
        if self.ops.shape[0] != len(self.labels):
            raise ValueError("label count does not match ops")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def n_sites(self) -> int:
        return self.ops.shape[1]

    @property
    def dim(self) -> int:
        return self.ops.shape[2]

    def label_total(self, i: int) -> np.ndarray:
        """Lambda_label summed over all sites."""
        return self.ops[i].sum(axis=0)

    def total(self) -> np.ndarray:
        return self.ops.sum(axis=(0, 1))

    def validate(self, herm_tol: float = linalg.HERMITICITY_TOL, psd_tol: float = linalg.POSITIVITY_TOL):
        for i in range(self.n_labels):
            for m in range(self.n_sites):
                op = self.ops[i, m]
                defect = linalg.hermiticity_defect(op)
                scale = max(1.0, float(np.max(np.abs(op), initial=0.0)))
                if defect > herm_tol * scale:
                    raise NotHermitianError(
                        f"rate operator ({self.labels[i]}, site {m}) hermiticity defect {defect:.3e}"
                    )
                w = np.linalg.eigvalsh(op)
                if w.size and w[0] < -psd_tol * max(1.0, float(w[-1])):
                    raise NotPositiveError(
                        f"rate operator ({self.labels[i]}, site {m}) eigenvalue {w[0]:.3e}"
                    )


@dataclass(eq=False)
class FlashModel:
    """Assembled model with eagerly derived generator and root operators.

    Identity-hashed: two assemblies are distinct cache keys even for equal
    data, so derived caches (propagator ladders) attach per instance.
    """

    lattice: Lattice
    hamiltonian: np.ndarray
    rates: RateOperatorFamily
    kind: str = "custom"
    basis_occupations: tuple[tuple[int, ...], ...] | None = None
    validate: bool = True

    def __post_init__(self):
        if self.rates.n_sites != self.lattice.n_sites:
            raise LatticeMismatchError(
                f"rate family has {self.rates.n_sites} sites, lattice has {self.lattice.n_sites}"
            )
        self.hamiltonian = linalg.require_hermitian(self.hamiltonian)
        if self.hamiltonian.shape[0] != self.rates.dim:
            raise ValueError("Hamiltonian dimension does not match rate operators")
        if self.validate:
            self.rates.validate()
        self.total_rate_op = self.rates.total()
        self.generator = -0.5 * self.total_rate_op - 1j * self.hamiltonian
        defect = float(np.max(np.abs(self.generator + self.generator.conj().T + self.total_rate_op)))
        scale = max(1.0, float(np.max(np.abs(self.total_rate_op))))
        if defect > 1e-12 * scale:
            raise NotHermitianError(f"generator dissipativity defect {defect:.3e}")
        self.sqrt_ops = np.empty_like(self.rates.ops)
        for i in range(self.n_labels):
            for m in range(self.n_sites):
                self.sqrt_ops[i, m] = linalg.hermitian_sqrt(self.rates.ops[i, m])
        self.label_index = {l: i for i, l in enumerate(self.rates.labels)}
        rate_eigs = np.linalg.eigvalsh(self.total_rate_op)
        self.total_rate_norm = float(rate_eigs[-1]) if rate_eigs.size else 0.0
        self.generator_norm1 = float(np.linalg.norm(self.generator, 1))

    @property
    def dim(self) -> int:
        return self.rates.dim

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites

    @property
    def n_labels(self) -> int:
        return self.rates.n_labels

    @property
    def labels(self) -> tuple[str, ...]:
        return self.rates.labels

    def rate_is_uniform(self, tol: float = 1e-12) -> bool:
        """True when Lambda_total is a multiple of the identity."""
        lam = np.trace(self.total_rate_op).real / self.dim
        return float(np.max(np.abs(self.total_rate_op - lam * np.eye(self.dim)))) <= tol * max(1.0, abs(lam))

    def channel_ops(self) -> np.ndarray:
        """sqrt_ops flattened to (n_labels * n_sites, d, d), channel = label * M + site."""
        return self.sqrt_ops.reshape(self.n_labels * self.n_sites, self.dim, self.dim)


@dataclass(frozen=True)
class FlashRecord:
    """One flash: time, operator label, lattice site."""

    t: float
    label: str
    site: int


@dataclass(frozen=True)
class MatterDensityField:
    """Expected flash-rate density per site for a given state."""

    lattice: Lattice
    values: np.ndarray  # (n_sites,) float64

    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """Menu of standard Hamiltonian terms for the model builders.

    hopping scales the periodic discrete Laplacian kinetic term
    -(hopping/2) * Lap; potential is a per-site diagonal; interaction is the
    on-site pair energy (density-density); drive adds drive * sum_k
    (a_k + a_k^dagger) on field spaces. matrix overrides everything and must
    be Hermitian on the full model space.
    """

    hopping: float = 0.0
    potential: tuple[float, ...] | None = None
    interaction: float = 0.0
    drive: float = 0.0
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.potential is not None:
            object.__setattr__(self, "potential", tuple(float(v) for v in self.potential))
        if self.matrix is not None and (
            self.hopping or self.interaction or self.drive or self.potential is not None
        ):
            raise ValueError("matrix override cannot be combined with term parameters")

    def requires_terms(self) -> bool:
        return self.matrix is None


def one_particle_kinetic(lattice: Lattice, hopping: float) -> np.ndarray:
    """-(hopping/2) times the periodic discrete Laplacian on lattice sites."""
    m = lattice.n_sites
    lap = np.zeros((m, m))
    coords = lattice.site_index_tuples()
    index = {tuple(c): i for i, c in enumerate(coords)}
    for i, c in enumerate(coords):
        for axis in range(lattice.ndim):
            for step in (-1, 1):
                nbr = list(c)
                nbr[axis] = (nbr[axis] + step) % lattice.shape[axis]
                lap[i, index[tuple(nbr)]] += 1.0
        lap[i, i] -= 2.0 * lattice.ndim
    return (-0.5 * hopping / lattice.spacing**2) * lap.astype(np.complex128)


def one_particle_hamiltonian(lattice: Lattice, h: HamiltonianSpec) -> np.ndarray:
    """Kinetic plus potential single-particle matrix on the site space."""
    if h.matrix is not None:
        mat = linalg.require_hermitian(h.matrix)
        if mat.shape[0] != lattice.n_sites:
            raise ValueError("explicit Hamiltonian dimension does not match lattice")
        return mat
    out = one_particle_kinetic(lattice, h.hopping)
    if h.potential is not None:
        if len(h.potential) != lattice.n_sites:
            raise ValueError(f"potential needs {lattice.n_sites} entries, got {len(h.potential)}")
        out = out + np.diag(np.asarray(h.potential, dtype=np.complex128))
    return out


def one_particle_rate_family(lattice: Lattice, profile: RateProfile, label: str = "p0") -> RateOperatorFamily:
    """Diagonal one-particle family: Lambda(site m) = diag_r weight(m, r)."""
    w = profile.weight_matrix(lattice)
    m = lattice.n_sites
    ops = np.zeros((1, m, m, m), dtype=np.complex128)
    for site in range(m):
        np.fill_diagonal(ops[0, site], w[site])
    return RateOperatorFamily(labels=(label,), ops=ops)


def _embed_single(site_op: np.ndarray, axis: int, n_factors: int) -> np.ndarray:
    """I x .. x site_op (at axis) x .. x I on the n-fold product space."""
    d = site_op.shape[0]
    out = np.eye(1, dtype=np.complex128)
    for k in range(n_factors):
        out = np.kron(out, site_op if k == axis else np.eye(d, dtype=np.complex128))
    return out


def build_grw_model(
    n_particles: int,
    lattice: Lattice,
    profile: RateProfile,
    h: HamiltonianSpec | None = None,
    mass_factors=None,
) -> FlashModel:
    """N distinguishable particles on the product space, one label each.

    Basis is row-major over particle positions (particle 0 slowest). Rate
    operator for label p_i at site m is diagonal with entries
    weight(m, r_i) * mass_factors[i].
    """
    h = h or HamiltonianSpec()
    if h.drive:
        raise ValueError("drive term only applies to field-space models")
    n = int(n_particles)
    if n < 1:
        raise ValueError("n_particles must be >= 1")
    m = lattice.n_sites
    dim = m**n
    if dim > linalg.DIM_CAP:
        raise DimensionOverflowError(f"product dimension {dim} exceeds cap {linalg.DIM_CAP}")
    if mass_factors is None:
        mass_factors = (1.0,) * n
    mass_factors = tuple(_check_positive_param("mass factor", v) for v in mass_factors)
    if len(mass_factors) != n:
        raise ValueError(f"need {n} mass factors, got {len(mass_factors)}")

    w = profile.weight_matrix(lattice)
    digits = np.indices((m,) * n).reshape(n, dim)
    ops = np.zeros((n, m, dim, dim), dtype=np.complex128)
    for i in range(n):
        for site in range(m):
            diag = mass_factors[i] * w[site, digits[i]]
            np.einsum("ii->i", ops[i, site])[:] = diag
    labels = tuple(f"p{i}" for i in range(n))

    if h.matrix is not None:
        ham = linalg.require_hermitian(h.matrix)
        if ham.shape[0] != dim:
            raise ValueError("explicit Hamiltonian dimension does not match model space")
    else:
        h1 = one_particle_hamiltonian(lattice, HamiltonianSpec(hopping=h.hopping, potential=h.potential))
        ham = np.zeros((dim, dim), dtype=np.complex128)
        for i in range(n):
            ham += _embed_single(h1, i, n)
        if h.interaction:
            pair = np.zeros(dim)
            for i in range(n):
                for j in range(i + 1, n):
                    pair += (digits[i] == digits[j]).astype(float)
            ham += h.interaction * np.diag(pair)

    rates = RateOperatorFamily(labels=labels, ops=ops)
    return FlashModel(lattice=lattice, hamiltonian=ham, rates=rates, kind="grw")


def build_identical_model(
    n_particles: int,
    parity: int,
    one_particle_rates: RateOperatorFamily,
    one_particle_h: np.ndarray,
    lattice: Lattice,
) -> FlashModel:
    """N identical particles: symmetrised operators restricted to one sector.

    Lambda(site) = sum_i embed(Lambda_1(site), i) and H = sum_i embed(h_1, i),
    both restricted via the orthonormal sector basis. Basis columns follow
    the canonical occupation order, so Fock blocks compare entrywise.
    For n_particles = 1 this reproduces the one-particle model exactly.
    """
    n = int(n_particles)
    if n < 1:
        raise ValueError("n_particles must be >= 1")
    if parity not in (1, -1):
        raise ValueError("parity must be +1 or -1")
    if one_particle_rates.n_labels != 1:
        raise ValueError("identical-particle builder needs a single-label one-particle family")
    d1 = one_particle_rates.dim
    if one_particle_rates.n_sites != lattice.n_sites:
        raise LatticeMismatchError("one-particle family site count does not match lattice")
    if parity == -1 and n > d1:
        raise EmptySectorError(f"{n} fermions do not fit in dimension {d1}")
    h1 = linalg.require_hermitian(one_particle_h)
    if h1.shape[0] != d1:
        raise ValueError("one-particle Hamiltonian dimension mismatch")

    q, occs = linalg.sector_basis(d1, n, parity)
    qc = q.conj().T
    m = lattice.n_sites
    dim = q.shape[1]
    ops = np.zeros((1, m, dim, dim), dtype=np.complex128)
    for site in range(m):
        full = np.zeros((d1**n, d1**n), dtype=np.complex128)
        for i in range(n):
            full += _embed_single(one_particle_rates.ops[0, site], i, n)
        ops[0, site] = qc @ full @ q
    h_full = np.zeros((d1**n, d1**n), dtype=np.complex128)
    for i in range(n):
        h_full += _embed_single(h1, i, n)
    ham = qc @ h_full @ q

    rates = RateOperatorFamily(labels=one_particle_rates.labels, ops=ops)
    return FlashModel(
        lattice=lattice,
        hamiltonian=ham,
        rates=rates,
        kind="identical",
        basis_occupations=tuple(occs),
    )


def fock_basis(n_sites: int, n_max: int, parity: int) -> list[tuple[int, ...]]:
    """Occupation basis graded by total count 0..n_max, canonical order inside each grade."""
    if parity not in (1, -1):
        raise ValueError("parity must be +1 or -1")
    max_occ = 1 if parity == -1 else None
    out = []
    for n in range(n_max + 1):
        out.extend(linalg.occupations(n_sites, n, max_occ=max_occ))
    return out


def creation_operators(basis: list[tuple[int, ...]], parity: int) -> list[np.ndarray]:
    """a_k^dagger in the graded occupation basis, with antisymmetric sign strings.

    Transitions out of the top grade are dropped (hard truncation).
    """
    n_sites = len(basis[0]) if basis else 0
    index = {occ: i for i, occ in enumerate(basis)}
    dim = len(basis)
    ops = []
    for k in range(n_sites):
        a_dag = np.zeros((dim, dim), dtype=np.complex128)
        for i, occ in enumerate(basis):
            if parity == -1 and occ[k] == 1:
                continue
            target = occ[:k] + (occ[k] + 1,) + occ[k + 1 :]
            j = index.get(target)
            if j is None:
                continue  # beyond the truncation grade
            if parity == -1:
                amp = -1.0 if sum(occ[:k]) % 2 else 1.0
            else:
                amp = math.sqrt(occ[k] + 1.0)
            a_dag[j, i] = amp
        ops.append(a_dag)
    return ops


def build_fock_model(
    lattice: Lattice,
    profile: RateProfile,
    parity: int,
    n_max: int,
    h: HamiltonianSpec | None = None,
    mass_factor: float = 1.0,
    label: str = "field",
) -> FlashModel:
    """Truncated field-space model: one label, number-operator rate densities.

    Lambda(site m) = mass_factor * sum_k weight(m, k) N_k, diagonal in the
    occupation basis. n_max = 0 gives the vacuum-only space with Lambda = 0.
    """
    h = h or HamiltonianSpec()
    if int(n_max) < 0:
        raise ValueError("n_max must be >= 0")
    mass_factor = _check_positive_param("mass factor", mass_factor)
    basis = fock_basis(lattice.n_sites, int(n_max), parity)
    dim = len(basis)
    if dim > linalg.DIM_CAP:
        raise DimensionOverflowError(f"field space dimension {dim} exceeds cap {linalg.DIM_CAP}")
    occ_matrix = np.array(basis, dtype=np.float64).reshape(dim, lattice.n_sites)
    w = profile.weight_matrix(lattice)
    m = lattice.n_sites
    ops = np.zeros((1, m, dim, dim), dtype=np.complex128)
    for site in range(m):
        diag = mass_factor * (occ_matrix @ w[site])
        np.einsum("ii->i", ops[0, site])[:] = diag

    if h.matrix is not None:
        ham = linalg.require_hermitian(h.matrix)
        if ham.shape[0] != dim:
            raise ValueError("explicit Hamiltonian dimension does not match field space")
    else:
        a_dag = creation_operators(basis, parity)
        a = [op.conj().T for op in a_dag]
        h1 = one_particle_hamiltonian(lattice, HamiltonianSpec(hopping=h.hopping, potential=h.potential))
        ham = np.zeros((dim, dim), dtype=np.complex128)
        for j in range(m):
            for k in range(m):
                if h1[j, k] != 0:
                    ham += h1[j, k] * (a_dag[j] @ a[k])
        if h.interaction:
            pair = 0.5 * h.interaction * occ_matrix * (occ_matrix - 1.0)
            ham += np.diag(pair.sum(axis=1)).astype(np.complex128)
        if h.drive:
            for k in range(m):
                ham += h.drive * (a_dag[k] + a[k])

    rates = RateOperatorFamily(labels=(label,), ops=ops)
    return FlashModel(
        lattice=lattice,
        hamiltonian=ham,
        rates=rates,
        kind="fock",
        basis_occupations=tuple(basis),
    )


def _require_same_lattice(m1: FlashModel, m2: FlashModel):
    if m1.lattice != m2.lattice:
        raise LatticeMismatchError(f"lattices differ: {m1.lattice} vs {m2.lattice}")


def compose_tensor(
    m1: FlashModel,
    m2: FlashModel,
    mode: str = "labeled",
    coupling: np.ndarray | None = None,
) -> FlashModel:
    """Joint model on the tensor product space.

    labeled: every constituent label survives with a "1:"/"2:" prefix, each
    rate operator embedded on its own factor. merged: a single label whose
    rate operator at each site is the sum of both embeddings; the total rate
    operator agrees between the two modes, only flash attribution differs.
    coupling, if given, is a Hermitian matrix added to H (it makes the
    subsystems interact; used by negative controls).
    """
    _require_same_lattice(m1, m2)
    if mode not in ("labeled", "merged"):
        raise ValueError(f"unknown mode {mode!r}")
    d1, d2 = m1.dim, m2.dim
    dim = d1 * d2
    if dim > linalg.DIM_CAP:
        raise DimensionOverflowError(f"product dimension {dim} exceeds cap {linalg.DIM_CAP}")
    i1 = np.eye(d1, dtype=np.complex128)
    i2 = np.eye(d2, dtype=np.complex128)
    ham = np.kron(m1.hamiltonian, i2) + np.kron(i1, m2.hamiltonian)
    if coupling is not None:
        coupling = linalg.require_hermitian(coupling)
        if coupling.shape[0] != dim:
            raise ValueError("coupling dimension does not match joint space")
        ham = ham + coupling
    n_sites = m1.n_sites
    if mode == "labeled":
        labels = tuple(f"1:{l}" for l in m1.labels) + tuple(f"2:{l}" for l in m2.labels)
        ops = np.zeros((len(labels), n_sites, dim, dim), dtype=np.complex128)
        for i in range(m1.n_labels):
            for site in range(n_sites):
                ops[i, site] = np.kron(m1.rates.ops[i, site], i2)
        for i in range(m2.n_labels):
            for site in range(n_sites):
                ops[m1.n_labels + i, site] = np.kron(i1, m2.rates.ops[i, site])
    else:
        labels = ("all",)
        ops = np.zeros((1, n_sites, dim, dim), dtype=np.complex128)
        for site in range(n_sites):
            acc = np.zeros((dim, dim), dtype=np.complex128)
            for i in range(m1.n_labels):
                acc += np.kron(m1.rates.ops[i, site], i2)
            for i in range(m2.n_labels):
                acc += np.kron(i1, m2.rates.ops[i, site])
            ops[0, site] = acc
    rates = RateOperatorFamily(labels=labels, ops=ops)
    return FlashModel(lattice=m1.lattice, hamiltonian=ham, rates=rates, kind="composite", validate=False)


def compose_direct_sum(m1: FlashModel, m2: FlashModel) -> FlashModel:
    """Alternative-sector model on the direct sum space.

    Shared labels get block-diagonal rate operators; labels present in only
    one summand get a zero block on the other. H is block diagonal, so the
    sectors never mix and populations stay put.
    """
    _require_same_lattice(m1, m2)
    labels = list(m1.labels) + [l for l in m2.labels if l not in m1.labels]
    d1, d2 = m1.dim, m2.dim
    dim = d1 + d2
    n_sites = m1.n_sites
    ops = np.zeros((len(labels), n_sites, dim, dim), dtype=np.complex128)
    for li, label in enumerate(labels):
        for site in range(n_sites):
            if label in m1.label_index:
                ops[li, site, :d1, :d1] = m1.rates.ops[m1.label_index[label], site]
            if label in m2.label_index:
                ops[li, site, d1:, d1:] = m2.rates.ops[m2.label_index[label], site]
    ham = linalg.direct_sum(m1.hamiltonian, m2.hamiltonian)
    rates = RateOperatorFamily(labels=tuple(labels), ops=ops)
    return FlashModel(lattice=m1.lattice, hamiltonian=ham, rates=rates, kind="composite", validate=False)


def split_by_support(model: FlashModel, site_groups, group_labels=None) -> FlashModel:
    """Relabel flashes by site membership instead of operator label.

    site_groups must partition the lattice sites. The new family has one
    label per group, with Lambda_g(site) = total Lambda(site) when site is in
    group g and zero otherwise; total rates and dynamics are unchanged.
    """
    groups = [tuple(sorted(int(s) for s in g)) for g in site_groups]
    flat = [s for g in groups for s in g]
    if sorted(flat) != list(range(model.n_sites)):
        raise ValueError("site groups must partition the lattice sites")
    if group_labels is None:
        group_labels = tuple(f"S{i}" for i in range(len(groups)))
    group_labels = tuple(str(l) for l in group_labels)
    if len(group_labels) != len(groups):
        raise ValueError("one label per site group required")
    site_totals = model.rates.ops.sum(axis=0)  # (n_sites, d, d)
    ops = np.zeros((len(groups), model.n_sites, model.dim, model.dim), dtype=np.complex128)
    for gi, group in enumerate(groups):
        for site in group:
            ops[gi, site] = site_totals[site]
    rates = RateOperatorFamily(labels=group_labels, ops=ops)
    return FlashModel(
        lattice=model.lattice, hamiltonian=model.hamiltonian, rates=rates, kind=model.kind, validate=False
    )


def require_normalized(psi: np.ndarray, tol: float = NORMALIZATION_TOL) -> np.ndarray:
    v = np.asarray(psi, dtype=np.complex128).reshape(-1)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise NotNormalizedError(f"state norm {norm} differs from 1 beyond {tol}")
    return v


def basis_state(model: FlashModel, index: int) -> np.ndarray:
    psi = np.zeros(model.dim, dtype=np.complex128)
    psi[index] = 1.0
    return psi


def propagate(model: FlashModel, psi: np.ndarray, t: float) -> np.ndarray:
    """Apply the no-flash propagator W_t = e^{G t}; contracts the norm.

    Long intervals are split into chunks so each exponential stays inside
    the accuracy region; the semigroup property makes the split exact.
    """
    t = float(t)
    if t < 0:
        raise NegativeTimeError(f"propagation time {t} is negative")
    v = np.asarray(psi, dtype=np.complex128).reshape(-1)
    if t == 0.0:
        return v.copy()
    n_chunks = max(1, int(math.ceil(model.generator_norm1 * t / PROPAGATE_CHUNK_NORM)))
    step = linalg.semigroup_exp(model.generator, t / n_chunks)
    for _ in range(n_chunks):
        v = step @ v
    return v


def _check_history(history, t_start: float):
    prev = float(t_start)
    for k, rec in enumerate(history):
        if rec.t <= prev:
            raise NonMonotoneHistoryError(f"flash {k} at t={rec.t} does not follow t={prev} strictly")
        prev = rec.t


def kernel_apply(model: FlashModel, psi0: np.ndarray, history, t_start: float = 0.0) -> np.ndarray:
    """Apply the flash kernel for a history: alternating W and root operators.

    Returns the unnormalised vector whose squared norm is the joint density
    of the history. History times must increase strictly from t_start.
    """
    _check_history(history, t_start)
    v = np.asarray(psi0, dtype=np.complex128).reshape(-1)
    prev = float(t_start)
    for rec in history:
        v = propagate(model, v, rec.t - prev)
        li = model.label_index[rec.label]
        v = model.sqrt_ops[li, rec.site] @ v
        prev = rec.t
    return v


def flash_rate_density(model: FlashModel, psi: np.ndarray) -> np.ndarray:
    """<psi| Lambda_label(site) |psi> as a (n_labels, n_sites) array.

    Entries in [-1e-12, 0) are round-off and clipped to zero; anything more
    negative indicates an invalid family and raises.
    """
    v = require_normalized(psi)
    out = np.empty((model.n_labels, model.n_sites))
    for i in range(model.n_labels):
        for m in range(model.n_sites):
            out[i, m] = float(np.vdot(v, model.rates.ops[i, m] @ v).real)
    if out.min(initial=0.0) < -1e-12:
        raise NotPositiveError(f"rate density {out.min():.3e} below -1e-12")
    return np.clip(out, 0.0, None)


def matter_density(model: FlashModel, psi: np.ndarray) -> MatterDensityField:
    """Per-site expected flash rate, summed over labels."""
    return MatterDensityField(lattice=model.lattice, values=flash_rate_density(model, psi).sum(axis=0))


def collapse(model: FlashModel, psi: np.ndarray, label: str, site: int) -> np.ndarray:
    """Apply the root operator for (label, site) and renormalise."""
    li = model.label_index[label]
    w = model.sqrt_ops[li, site] @ np.asarray(psi, dtype=np.complex128).reshape(-1)
    norm = float(np.linalg.norm(w))
    if norm < 1e-150:
        raise ZeroProbabilityFlashError(f"flash ({label}, site {site}) has vanishing amplitude")
    return w / norm


def conditional_wave_function(model: FlashModel, psi0: np.ndarray, history, t: float, t_start: float = 0.0) -> np.ndarray:
    """Normalised state at time t conditioned on the given flash history."""
    t = float(t)
    last = history[-1].t if history else float(t_start)
    if t < last:
        raise NonMonotoneHistoryError(f"evaluation time {t} precedes last flash at {last}")
    v = kernel_apply(model, psi0, history, t_start=t_start)
    v = propagate(model, v, t - last)
    norm = float(np.linalg.norm(v))
    if norm < 1e-150:
        raise ZeroNormError("conditional state has vanishing norm")
    return v / norm
