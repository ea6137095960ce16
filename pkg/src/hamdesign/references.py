"""Reference wavefunctions: analytic spin-chain states, planted problems, amplitude files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hilbert import BasisError, SpinBasis, WaveFunction
from .operators import HamiltonianAnsatz
from .spectra import eigs_low

REFERENCE_NAMES = ("aklt_periodic", "majumdar_ghosh_dimer", "ghz")


class ReferenceError(ValueError):
    pass


class PlantedProblemError(ReferenceError):
    """No admissible (unique, gapped) planted Hamiltonian was found."""


def _aklt_tensors() -> np.ndarray:
    """Spin-1 AKLT matrices ordered m = +1, 0, -1."""
    sp_ = np.array([[0, 1], [0, 0]], dtype=float)
    sz = np.diag([1.0, -1.0])
    return np.array([np.sqrt(2 / 3) * sp_, -np.sqrt(1 / 3) * sz, -np.sqrt(2 / 3) * sp_.T])


def _aklt_periodic(basis: SpinBasis) -> np.ndarray:
    if basis.local_dim != 3:
        raise ReferenceError("aklt_periodic needs spin-1 sites (local_dim = 3)")
    A = _aklt_tensors()
    prod = A[basis.configs[:, 0]]
    for i in range(1, basis.n_sites):
        prod = prod @ A[basis.configs[:, i]]
    return np.trace(prod, axis1=1, axis2=2)


def _mg_dimer(basis: SpinBasis) -> np.ndarray:
    if basis.local_dim != 2:
        raise ReferenceError("majumdar_ghosh_dimer needs spin-1/2 sites")
    if basis.n_sites % 2:
        raise ReferenceError(f"majumdar_ghosh_dimer needs an even chain, got N={basis.n_sites}")
    singlet = np.array([[0.0, 1.0], [-1.0, 0.0]]) / np.sqrt(2)
    amp = np.ones(basis.dim)
    for i in range(0, basis.n_sites, 2):
        amp = amp * singlet[basis.configs[:, i], basis.configs[:, i + 1]]
    return amp


def _ghz(basis: SpinBasis) -> np.ndarray:
    if basis.local_dim != 2:
        raise ReferenceError("ghz needs spin-1/2 sites")
    amp = np.zeros(basis.dim)
    for digit in (0, 1):
        pos = basis.lookup(np.array([np.full(basis.n_sites, digit) @ basis.place_values]))[0]
        if pos < 0:
            raise ReferenceError(f"ghz component |{digit}...{digit}> is outside sector S_z={basis.sector}")
        amp[pos] = 1.0
    return amp


_BUILDERS = {"aklt_periodic": _aklt_periodic, "majumdar_ghosh_dimer": _mg_dimer, "ghz": _ghz}


def make_reference_state(name: str, size: int, basis: SpinBasis) -> WaveFunction:
    if name not in _BUILDERS:
        raise ReferenceError(f"unknown reference state {name!r}; choose from {REFERENCE_NAMES}")
    if basis.n_sites != size:
        raise ReferenceError(f"basis has {basis.n_sites} sites, requested size {size}")
    amp = _BUILDERS[name](basis)
    if np.linalg.norm(amp) == 0:
        raise ReferenceError(f"{name} has no weight in sector S_z={basis.sector}")
    return WaveFunction.normalized(basis, amp)


# ---------------------------------------------------------------------------
# planted problems


@dataclass
class PlantedProblem:
    gamma_star: np.ndarray
    references: dict  # size -> WaveFunction
    gaps: dict  # size -> spectral gap of H(gamma*)
    support: tuple  # operator indices
    attempts: int


def generate_planted_problem(ansatz: HamiltonianAnsatz, support, seed: int, bases: dict,
                             low: float = 0.5, high: float = 1.5, min_gap: float = 1e-3,
                             max_attempts: int = 20) -> PlantedProblem:
    """Random coefficients on ``support`` (labels or indices), zero elsewhere.

    The ground state of H(gamma*) at every size becomes the reference; draws
    with a degenerate or nearly gapless ground state are rejected.
    """
    idx = []
    for s in support:
        if isinstance(s, str):
            if s not in ansatz.labels:
                raise ReferenceError(f"support label {s!r} not in ansatz {ansatz.labels}")
            idx.append(ansatz.labels.index(s))
        else:
            if not 0 <= int(s) < len(ansatz.labels):
                raise ReferenceError(f"support index {s} out of range")
            idx.append(int(s))
    if not idx:
        raise ReferenceError("empty support")
    rng = np.random.default_rng(seed)
    last = None
    for attempt in range(1, max_attempts + 1):
        gamma = np.zeros(ansatz.n_params)
        gamma[idx] = rng.uniform(low, high, size=len(idx))
        refs, gaps, ok = {}, {}, True
        for n in sorted(bases):
            rep = eigs_low(ansatz.hamiltonian_at(gamma, bases[n]), 1, bases[n])
            if rep.ground_degeneracy != 1 or rep.gap < min_gap:
                ok = False
                last = (n, rep.ground_degeneracy, rep.gap)
                break
            refs[n], gaps[n] = rep.ground_state, rep.gap
        if ok:
            return PlantedProblem(gamma, refs, gaps, tuple(idx), attempt)
    raise PlantedProblemError(f"planted Hamiltonian stayed degenerate/gapless after {max_attempts} "
                              f"draws (last: N={last[0]}, degeneracy {last[1]}, gap {last[2]:.2e}); "
                              f"try a different support")


# ---------------------------------------------------------------------------
# amplitude files


def write_amplitudes(path, psi: WaveFunction):
    """Text format: ``#`` header lines, then ``index,re,im`` per nonzero amplitude."""
    b = psi.basis
    lines = [f"# amplitudes v1 n_sites={b.n_sites} local_dim={b.local_dim} "
             f"sector={b.sector} boundary={b.boundary} dim={b.dim}"]
    for i, a in enumerate(psi.amplitudes):
        if a != 0:
            lines.append(f"{i},{float(a.real)!r},{float(a.imag)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_amplitudes(path, basis: SpinBasis) -> WaveFunction:
    amps = np.zeros(basis.dim, dtype=complex)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 3:
            raise ReferenceError(f"{path}:{lineno}: expected 'index,re,im'")
        try:
            i, re_, im = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ReferenceError(f"{path}:{lineno}: {exc}") from exc
        if not 0 <= i < basis.dim:
            raise BasisError(f"{path}:{lineno}: index {i} outside basis of dim {basis.dim}")
        amps[i] = complex(re_, im)
    return WaveFunction.normalized(basis, amps)
