"""Exact-diagonalization back-end: low spectrum, ground multiplet, expectation values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .hilbert import SpinBasis, WaveFunction

DENSE_MAX_DIM = 2048
DEGENERACY_RTOL = 1e-9
RESIDUAL_TOL = 1e-10
MAX_RESTARTS = 50


class LanczosError(RuntimeError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    eigenvalues: np.ndarray
    eigenvectors: tuple  # WaveFunction per eigenvalue
    ground_degeneracy: int
    e0: float
    gap: float
    method: str = "dense"

    @property
    def ground_space(self) -> tuple:
        return self.eigenvectors[:self.ground_degeneracy]

    @property
    def ground_state(self) -> WaveFunction:
        return self.eigenvectors[0]


def degeneracy_tol(e0: float) -> float:
    return DEGENERACY_RTOL * max(1.0, abs(e0))


def _vector(psi) -> np.ndarray:
    return psi.amplitudes if isinstance(psi, WaveFunction) else np.asarray(psi)


def _check_dims(H, v):
    if H.shape[0] != H.shape[1] or H.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: operator {H.shape} vs state of length {v.shape[0]}")


def _cluster_closed(vals, k, tol) -> bool:
    """True when vals (ascending) resolve the ground multiplet and the level containing vals[k-1]."""
    return len(vals) > k and vals[-1] - vals[k - 1] > tol


def _dense_low(H, k, tol_fn):
    a = H.toarray() if sp.issparse(H) else np.asarray(H)
    dim = a.shape[0]
    kk = min(dim, k + 1)
    while True:
        if kk >= dim:
            vals, vecs = sla.eigh(a)
        else:
            vals, vecs = sla.eigh(a, subset_by_index=[0, kk - 1], driver="evr")
        tol = tol_fn(vals[0])
        if kk >= dim or _cluster_closed(vals, k, tol):
            return vals, vecs
        kk = min(dim, 2 * kk)


def _lanczos_run(H, v0, locked, m):
    """One Lanczos pass with full reorthogonalization against its own basis and ``locked``."""
    dim = v0.shape[0]
    dtype = np.result_type(H.dtype, v0.dtype)
    V = np.zeros((dim, m), dtype=dtype)
    alpha = np.zeros(m)
    beta = np.zeros(m)
    v = v0.astype(dtype)
    steps = m
    for j in range(m):
        V[:, j] = v
        w = H @ v
        alpha[j] = np.vdot(v, w).real
        w = w - alpha[j] * v - (beta[j - 1] * V[:, j - 1] if j else 0)
        for _ in range(2):
            if locked.shape[1]:
                w = w - locked @ (locked.conj().T @ w)
            w = w - V[:, :j + 1] @ (V[:, :j + 1].conj().T @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] < 1e-12 * max(1.0, abs(alpha[j])):
            steps = j + 1
            break
        v = w / beta[j]
    T = np.diag(alpha[:steps]) + np.diag(beta[:steps - 1], 1) + np.diag(beta[:steps - 1], -1)
    return V[:, :steps], T


def lanczos_lowest(H, k: int = 1, seed: int = 0, krylov_dim: int = 80,
                   max_restarts: int = MAX_RESTARTS, tol_fn=degeneracy_tol):
    """Lowest eigenpairs by restarted Lanczos with locking.

    Each pass converges the lowest eigenpair in the complement of the pairs
    already found, so degenerate partners are recovered one by one. Passes
    continue until the multiplet containing the k-th level is closed.
    """
    dim = H.shape[0]
    rng = np.random.default_rng(seed)
    dtype = np.result_type(H.dtype, float)
    locked = np.zeros((dim, 0), dtype=dtype)
    vals = []
    while True:
        if len(vals) >= dim:
            break
        if vals and _cluster_closed(np.array(vals), k, tol_fn(vals[0])):
            break
        v = rng.standard_normal(dim).astype(dtype)
        v -= locked @ (locked.conj().T @ v)
        v /= np.linalg.norm(v)
        m = min(krylov_dim, dim - len(vals))
        residuals = []
        for _ in range(max_restarts):
            V, T = _lanczos_run(H, v, locked, m)
            theta, S = np.linalg.eigh(T)
            y = V @ S[:, 0]
            y -= locked @ (locked.conj().T @ y)
            y /= np.linalg.norm(y)
            lam = float(np.vdot(y, H @ y).real)
            res = float(np.linalg.norm(H @ y - lam * y))
            residuals.append(res)
            if res < RESIDUAL_TOL * max(1.0, abs(lam)):
                break
            v = y
        else:
            raise LanczosError(f"Lanczos did not converge eigenpair {len(vals)} after "
                               f"{max_restarts} restarts", residuals)
        vals.append(lam)
        locked = np.column_stack([locked, y])
    order = np.argsort(vals, kind="stable")
    return np.array(vals)[order], locked[:, order]


def eigs_low(H, k: int = 1, basis: SpinBasis | None = None, seed: int = 0,
             dense_max_dim: int = DENSE_MAX_DIM) -> EvaluationReport:
    """Lowest ``k`` eigenpairs, enlarged so degenerate multiplets are never split.

    Dense diagonalization up to ``dense_max_dim``, Lanczos above.
    """
    dim = H.shape[0]
    if H.shape != (dim, dim):
        raise ValueError(f"operator must be square, got {H.shape}")
    if not 1 <= k <= dim:
        raise ValueError(f"k={k} outside [1, {dim}]")
    if dim <= dense_max_dim:
        vals, vecs = _dense_low(H, k, degeneracy_tol)
        method = "dense"
    else:
        vals, vecs = lanczos_lowest(sp.csr_matrix(H), k, seed=seed)
        method = "lanczos"
    e0 = float(vals[0])
    tol = degeneracy_tol(e0)
    deg = int(np.sum(vals - e0 <= tol))
    above = vals[vals - e0 > tol]
    gap = float(above[0] - e0) if above.size else 0.0
    # report through the end of the multiplet containing level k
    n_rep = max(k, deg)
    while n_rep < len(vals) and vals[n_rep] - vals[n_rep - 1] <= tol:
        n_rep += 1
    if basis is None:
        basis = _anonymous_basis(dim)
    vectors = tuple(WaveFunction(basis, vecs[:, i]) for i in range(n_rep))
    return EvaluationReport(np.array(vals[:n_rep], dtype=float), vectors, deg, e0, gap, method)


def _anonymous_basis(dim: int) -> SpinBasis:
    idx = np.arange(dim, dtype=np.int64)
    return SpinBasis(0, dim, None, "open", np.zeros((dim, 0), dtype=np.int8), idx)


def expectation(H, psi) -> float:
    v = _vector(psi)
    _check_dims(H, v)
    val = np.vdot(v, H @ v)
    if abs(val.imag) > 1e-10 * max(1.0, abs(val.real)):
        raise ValueError(f"expectation value has imaginary part {val.imag:.3e}; operator not hermitian?")
    return float(val.real)


def energy_variance(H, psi) -> float:
    """<H^2> - <H>^2 from a single matvec, as the squared norm of (H - <H>) psi."""
    v = _vector(psi)
    _check_dims(H, v)
    hv = H @ v
    mean = np.vdot(v, hv).real
    return float(np.linalg.norm(hv - mean * v) ** 2)


def relative_energy_variance(H, psi) -> float | None:
    """Energy variance divided by <H>^2; ``None`` when <H> vanishes."""
    mean = expectation(H, psi)
    if abs(mean) < 1e-14:
        return None
    return energy_variance(H, psi) / mean ** 2


def symmetry_expectation(G, psi) -> float:
    return expectation(G, psi)
