"""Many-body bases for chains of d-level sites and state comparison metrics.

Local state ``s`` on a site of dimension ``d`` carries magnetization
``m = S - s`` with ``S = (d - 1) / 2``, so digit 0 is "spin up". Configurations
are enumerated lexicographically with site 0 as the most significant digit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-10
KL_FLOOR = 1e-30


class BasisError(ValueError):
    """Raised for inconsistent or empty basis requests."""


@dataclass(frozen=True, eq=False)
class SpinBasis:
    n_sites: int
    local_dim: int
    sector: float | None = None
    boundary: str = "open"
    configs: np.ndarray = field(repr=False, default=None)
    full_index: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return len(self.full_index)

    @property
    def spin(self) -> float:
        return (self.local_dim - 1) / 2

    @property
    def key(self) -> tuple:
        return (self.n_sites, self.local_dim, self.sector, self.boundary)

    def __eq__(self, other):
        return isinstance(other, SpinBasis) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def config_of(self, i: int) -> np.ndarray:
        return self.configs[i].copy()

    def index_of(self, config) -> int:
        """Position of a configuration (sequence of local digits) in the basis."""
        config = np.asarray(config)
        if config.shape != (self.n_sites,) or np.any(config < 0) or np.any(config >= self.local_dim):
            raise BasisError(f"invalid configuration {config.tolist()}")
        full = int(config @ self.place_values)
        return self.lookup(np.array([full]))[0]

    @property
    def place_values(self) -> np.ndarray:
        return self.local_dim ** np.arange(self.n_sites - 1, -1, -1, dtype=np.int64)

    def lookup(self, full: np.ndarray) -> np.ndarray:
        """Map full-space indices to basis positions; -1 where absent."""
        full = np.asarray(full, dtype=np.int64)
        if self.sector is None:
            return full.copy()
        pos = np.searchsorted(self.full_index, full)
        pos = np.minimum(pos, self.dim - 1)
        return np.where(self.full_index[pos] == full, pos, -1)

    def magnetization(self) -> np.ndarray:
        """Total S_z of every configuration."""
        return self.n_sites * self.spin - self.configs.sum(axis=1)


def enumerate_basis(n_sites: int, local_dim: int = 2, sector: float | None = None,
                    boundary: str = "open") -> SpinBasis:
    if n_sites < 1:
        raise BasisError("n_sites must be >= 1")
    if local_dim < 2:
        raise BasisError("local_dim must be >= 2")
    if boundary not in ("open", "periodic"):
        raise BasisError(f"unknown boundary {boundary!r}")
    full = np.arange(local_dim ** n_sites, dtype=np.int64)
    digits = (full[:, None] // local_dim ** np.arange(n_sites - 1, -1, -1, dtype=np.int64)) % local_dim
    if sector is not None:
        spin = (local_dim - 1) / 2
        mag = n_sites * spin - digits.sum(axis=1)
        keep = np.abs(mag - sector) < 1e-9
        if not keep.any():
            raise BasisError(f"empty sector: no configuration of {n_sites} sites "
                             f"(d={local_dim}) has total S_z = {sector}")
        full, digits = full[keep], digits[keep]
        sector = float(sector)
    digits = digits.astype(np.int8)
    digits.flags.writeable = False
    full.flags.writeable = False
    return SpinBasis(n_sites, local_dim, sector, boundary, digits, full)


@dataclass(frozen=True, eq=False)
class WaveFunction:
    basis: SpinBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.basis.dim,):
            raise BasisError(f"amplitude vector of length {amps.shape} does not match basis dim {self.basis.dim}")
        amps = amps.copy()
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def normalized(cls, basis: SpinBasis, amplitudes) -> "WaveFunction":
        amps = np.asarray(amplitudes, dtype=complex)
        norm = np.linalg.norm(amps)
        if norm == 0:
            raise BasisError("cannot normalize the zero vector")
        return cls(basis, amps / norm)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


def _check_pair(a: WaveFunction, b: WaveFunction):
    if a.basis != b.basis or len(a.amplitudes) != len(b.amplitudes):
        raise BasisError(f"basis mismatch: {a.basis.key} (dim {a.basis.dim}) vs "
                         f"{b.basis.key} (dim {b.basis.dim})")


def overlap(a: WaveFunction, b: WaveFunction) -> float:
    """Absolute value of the scalar product, clipped to [0, 1]."""
    _check_pair(a, b)
    return min(1.0, float(abs(np.vdot(a.amplitudes, b.amplitudes))))


def kl_divergence(reference: WaveFunction, candidate: WaveFunction) -> float:
    """Relative entropy of the candidate's configuration distribution w.r.t. the reference.

    Terms with vanishing reference weight contribute nothing; vanishing
    candidate weights are floored at 1e-30 so the result stays finite.
    """
    _check_pair(reference, candidate)
    p = reference.probabilities
    q = np.maximum(candidate.probabilities, KL_FLOOR)
    mask = p >= KL_FLOOR
    p, q = p[mask], q[mask]
    return float(np.sum(p * (np.log(p) - np.log(q))))


def subspace_overlap(reference: WaveFunction, span) -> float:
    """Norm of the projection of ``reference`` onto the span of orthonormal states."""
    span = list(span)
    if not span:
        raise BasisError("empty span")
    for w in span:
        _check_pair(reference, w)
    vecs = np.array([w.amplitudes for w in span])
    gram = vecs.conj() @ vecs.T
    err = np.max(np.abs(gram - np.eye(len(span))))
    if err > ORTHONORMAL_TOL:
        raise BasisError(f"span is not orthonormal (max Gram deviation {err:.3e})")
    coeffs = vecs.conj() @ reference.amplitudes
    return min(1.0, float(np.linalg.norm(coeffs)))


def best_vector_in_span(reference: WaveFunction, span) -> WaveFunction:
    """The normalized state of the span with maximal overlap with ``reference``."""
    span = list(span)
    if len(span) == 1:
        return span[0]
    vecs = np.array([w.amplitudes for w in span])
    proj = (vecs.conj() @ reference.amplitudes) @ vecs
    if np.linalg.norm(proj) < 1e-14:
        return span[0]
    return WaveFunction.normalized(reference.basis, proj)
