"""Operator sums over spin chains, sparse assembly, and Hamiltonian ansatzes."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .hilbert import SpinBasis

HERMITIAN_TOL = 1e-12
LEAK_TOL = 1e-12


class OperatorError(ValueError):
    pass


class SectorViolation(OperatorError):
    pass


# ---------------------------------------------------------------------------
# single-site matrices


def spin_matrices(local_dim: int) -> dict[str, np.ndarray]:
    """Spin-S operators with S = (d-1)/2, ordered m = S, S-1, ..., -S."""
    S = (local_dim - 1) / 2
    m = S - np.arange(local_dim)
    sz = np.diag(m).astype(complex)
    sp_ = np.zeros((local_dim, local_dim), dtype=complex)
    for s in range(1, local_dim):
        sp_[s - 1, s] = np.sqrt(S * (S + 1) - m[s] * (m[s] + 1))
    sm = sp_.conj().T
    return {
        "I": np.eye(local_dim, dtype=complex),
        "Sz": sz,
        "Sp": sp_,
        "Sm": sm,
        "Sx": (sp_ + sm) / 2,
        "Sy": (sp_ - sm) / 2j,
    }


PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


# ---------------------------------------------------------------------------
# operator algebra


@dataclass(frozen=True, eq=False)
class OperatorTerm:
    factors: tuple  # ((site, matrix), ...)
    coefficient: complex = 1.0

    def __post_init__(self):
        factors = tuple((int(s), np.asarray(m, dtype=complex)) for s, m in self.factors)
        sites = [s for s, _ in factors]
        if len(set(sites)) != len(sites):
            raise OperatorError(f"repeated site in term factors: {sites}")
        for s, m in factors:
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise OperatorError(f"factor on site {s} is not a square matrix")
        object.__setattr__(self, "factors", factors)

    @property
    def sites(self) -> list[int]:
        return [s for s, _ in self.factors]

    def describe(self) -> str:
        return f"{self.coefficient:g}*[" + ",".join(str(s) for s in self.sites) + "]"

    def __matmul__(self, other: "OperatorTerm") -> "OperatorTerm":
        merged = dict(self.factors)
        for s, m in other.factors:
            merged[s] = merged[s] @ m if s in merged else m
        return OperatorTerm(tuple(sorted(merged.items(), key=lambda x: x[0])),
                            self.coefficient * other.coefficient)


@dataclass(frozen=True, eq=False)
class OperatorSum:
    terms: tuple = ()
    hermitian: bool = True
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    def __add__(self, other: "OperatorSum") -> "OperatorSum":
        return OperatorSum(self.terms + other.terms, self.hermitian and other.hermitian, self.label)

    def scaled(self, c) -> "OperatorSum":
        hermitian = self.hermitian and np.isreal(c)
        return OperatorSum(tuple(OperatorTerm(t.factors, t.coefficient * c) for t in self.terms),
                           hermitian, self.label)

    def __matmul__(self, other: "OperatorSum") -> "OperatorSum":
        terms = tuple(a @ b for a in self.terms for b in other.terms)
        # a product of hermitian operators is hermitian only if they commute; verified at assembly
        return OperatorSum(terms, self.hermitian and other.hermitian, self.label)

    def max_site(self) -> int:
        return max((s for t in self.terms for s in t.sites), default=-1)


def identity_sum(coefficient=1.0) -> OperatorSum:
    return OperatorSum((OperatorTerm((), coefficient),))


def site_operator(site: int, matrix, coefficient=1.0) -> OperatorSum:
    return OperatorSum((OperatorTerm(((site, matrix),), coefficient),))


def product_operator(factors, coefficient=1.0) -> OperatorSum:
    return OperatorSum((OperatorTerm(tuple(factors), coefficient),))


# ---------------------------------------------------------------------------
# assembly


def assemble_sparse(op: OperatorSum, basis: SpinBasis) -> sp.csr_matrix:
    """Matrix of ``op`` in ``basis`` as CSR with sorted indices and summed duplicates.

    Within a magnetization sector, individual terms may leave the sector as
    long as the summed operator does not (e.g. Sx Sx + Sy Sy); a net leak is
    reported with the offending term.
    """
    d, n, dim = basis.local_dim, basis.n_sites, basis.dim
    configs = basis.configs
    full = basis.full_index
    pv = basis.place_values
    rows, cols, vals = [], [], []
    leak_keys, leak_vals, leak_term = [], [], []
    all_idx = np.arange(dim)

    for t_idx, term in enumerate(op.terms):
        if term.coefficient == 0:
            continue
        for s, m in term.factors:
            if not 0 <= s < n:
                raise OperatorError(f"term {term.describe()} acts on site {s} outside [0, {n})")
            if m.shape != (d, d):
                raise OperatorError(f"term {term.describe()}: factor on site {s} has shape {m.shape}, "
                                    f"expected {(d, d)}")
        if not term.factors:
            rows.append(all_idx)
            cols.append(all_idx)
            vals.append(np.full(dim, term.coefficient, dtype=complex))
            continue
        sites = term.sites
        mats = [m for _, m in term.factors]
        old = configs[:, sites].astype(np.int64)
        for new in itertools.product(range(d), repeat=len(sites)):
            amp = np.full(dim, term.coefficient, dtype=complex)
            for j, m in enumerate(mats):
                amp = amp * m[new[j], old[:, j]]
            nz = np.nonzero(amp)[0]
            if nz.size == 0:
                continue
            shift = sum((new[j] - old[nz, j]) * pv[sites[j]] for j in range(len(sites)))
            target = full[nz] + shift
            pos = basis.lookup(target)
            inside = pos >= 0
            rows.append(pos[inside])
            cols.append(nz[inside])
            vals.append(amp[nz][inside])
            if not inside.all():
                out = ~inside
                leak_keys.append(np.stack([target[out], nz[out]], axis=1))
                leak_vals.append(amp[nz][out])
                leak_term.append(np.full(out.sum(), t_idx))

    if leak_keys:
        keys = np.concatenate(leak_keys)
        lv = np.concatenate(leak_vals)
        lt = np.concatenate(leak_term)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        net = np.zeros(len(uniq), dtype=complex)
        np.add.at(net, inv, lv)
        bad = np.nonzero(np.abs(net) > LEAK_TOL)[0]
        if bad.size:
            culprit = op.terms[int(lt[np.isin(inv, bad)][0])]
            raise SectorViolation(
                f"operator {op.label or '<unnamed>'} leaves sector S_z={basis.sector}: "
                f"offending term {culprit.describe()}")

    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0, dtype=complex)
    mat = sp.coo_matrix((v, (r, c)), shape=(dim, dim)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    mat.eliminate_zeros()
    if mat.nnz and np.all(mat.data.imag == 0):
        mat = mat.real.tocsr()
    if op.hermitian:
        dev = abs(mat - mat.getH()).max() if mat.nnz else 0.0
        if dev >= HERMITIAN_TOL:
            raise OperatorError(f"operator {op.label or '<unnamed>'} flagged hermitian but "
                                f"max|A - A^H| = {dev:.3e}")
    return mat


def matvec(H, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if H.shape[1] != v.shape[0]:
        raise OperatorError(f"dimension mismatch: matrix {H.shape} vs vector {v.shape}")
    return H @ v


# ---------------------------------------------------------------------------
# operator bases and parametrizations


@dataclass(frozen=True, eq=False)
class OperatorBasis:
    operators: tuple
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.operators) < 1:
            raise OperatorError("operator basis needs at least one operator")
        if len(self.operators) != len(self.labels):
            raise OperatorError("one label per operator required")
        if len(set(self.labels)) != len(self.labels):
            raise OperatorError(f"duplicate labels in {self.labels}")

    def __len__(self):
        return len(self.operators)


@dataclass(frozen=True)
class ParametrizationMap:
    """Map from a parameter vector p to operator coefficients c(p).

    ``kind="linear"``: c = p.  ``kind="polynomial"``: ``table[m]`` is a list of
    ``(coefficient, powers)`` monomials with ``len(powers) == n_params``.
    """

    kind: str
    n_params: int
    n_coeffs: int
    table: tuple = ()
    box: tuple | None = None  # ((lo, hi), ...) per parameter

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial"):
            raise OperatorError(f"unknown parametrization kind {self.kind!r}")
        if self.kind == "linear" and self.n_params != self.n_coeffs:
            raise OperatorError("linear parametrization needs as many parameters as operators")
        if self.kind == "polynomial":
            table = tuple(tuple((float(c), tuple(int(k) for k in pw)) for c, pw in row) for row in self.table)
            if len(table) != self.n_coeffs:
                raise OperatorError(f"polynomial table has {len(table)} rows, expected {self.n_coeffs}")
            for row in table:
                for _, pw in row:
                    if len(pw) != self.n_params or min(pw, default=0) < 0:
                        raise OperatorError(f"bad monomial powers {pw}")
            object.__setattr__(self, "table", table)
        if self.box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
            if len(box) != self.n_params or any(lo >= hi for lo, hi in box):
                raise OperatorError(f"invalid parameter box {self.box}")
            object.__setattr__(self, "box", box)

    @classmethod
    def linear(cls, n: int, box=None) -> "ParametrizationMap":
        return cls("linear", n, n, box=box)

    @classmethod
    def polynomial(cls, table, n_params: int, box=None) -> "ParametrizationMap":
        return cls("polynomial", n_params, len(table), tuple(table), box)

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_params,):
            raise OperatorError(f"expected {self.n_params} parameters, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise OperatorError(f"non-finite parameters {p}")
        if self.kind == "linear":
            return p.copy()
        out = np.empty(self.n_coeffs)
        for m, row in enumerate(self.table):
            out[m] = sum(c * np.prod(p ** np.array(pw)) for c, pw in row)
        return out


class HamiltonianAnsatz:
    """H(p) = sum_m c_m(p) O_m for an operator family defined at every chain size.

    ``builder(n_sites, boundary, local_dim)`` returns the OperatorBasis for one
    size; assembled matrices are cached per basis as a shared sparsity pattern
    with one data row per operator, so H(p) is a single dense product.
    """

    def __init__(self, builder: Callable[..., OperatorBasis], labels: Sequence[str],
                 parametrization: ParametrizationMap | None = None, name: str = "custom"):
        self.builder = builder
        self.labels = tuple(labels)
        self.name = name
        self.map = parametrization or ParametrizationMap.linear(len(self.labels))
        if self.map.n_coeffs != len(self.labels):
            raise OperatorError(f"parametrization yields {self.map.n_coeffs} coefficients "
                                f"for {len(self.labels)} operators")
        self._cache: dict = {}

    @classmethod
    def fixed(cls, op_basis: OperatorBasis, parametrization=None) -> "HamiltonianAnsatz":
        return cls(lambda *a, **k: op_basis, op_basis.labels, parametrization)

    @property
    def n_params(self) -> int:
        return self.map.n_params

    def with_map(self, parametrization: ParametrizationMap) -> "HamiltonianAnsatz":
        return HamiltonianAnsatz(self.builder, self.labels, parametrization, self.name)

    def operator_basis(self, basis: SpinBasis) -> OperatorBasis:
        ob = self.builder(basis.n_sites, basis.boundary, basis.local_dim)
        if ob.labels != self.labels:
            raise OperatorError(f"builder labels {ob.labels} differ from ansatz labels {self.labels}")
        return ob

    def operator_matrices(self, basis: SpinBasis) -> list:
        return self._assembled(basis)["matrices"]

    def _assembled(self, basis: SpinBasis) -> dict:
        entry = self._cache.get(basis.key)
        if entry is not None:
            return entry
        mats = [assemble_sparse(op, basis) for op in self.operator_basis(basis).operators]
        pattern = sum((abs(m) for m in mats), sp.csr_matrix((basis.dim, basis.dim)))
        pattern = sp.csr_matrix(pattern)
        pattern.sort_indices()
        pattern.data[:] = 1.0
        is_real = all(not np.iscomplexobj(m.data) for m in mats)
        dtype = float if is_real else complex
        stack = np.zeros((len(mats), pattern.nnz), dtype=dtype)
        # position of every (row, col) inside the union pattern
        key_union = _keys(pattern, basis.dim)
        for i, m in enumerate(mats):
            m = sp.csr_matrix(m)
            m.sort_indices()
            idx = np.searchsorted(key_union, _keys(m, basis.dim))
            stack[i, idx] = m.data
        entry = {"matrices": mats, "indptr": pattern.indptr.copy(), "indices": pattern.indices.copy(),
                 "stack": stack, "dim": basis.dim}
        self._cache[basis.key] = entry
        return entry

    def coefficients(self, p) -> np.ndarray:
        return self.map(p)

    def hamiltonian_at(self, p, basis: SpinBasis) -> sp.csr_matrix:
        c = self.map(p)
        entry = self._assembled(basis)
        data = c @ entry["stack"]
        dim = entry["dim"]
        return sp.csr_matrix((data, entry["indices"], entry["indptr"]), shape=(dim, dim))


def _keys(m: sp.csr_matrix, dim: int) -> np.ndarray:
    rows = np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))
    return rows * dim + m.indices.astype(np.int64)


def hamiltonian_at(ansatz: HamiltonianAnsatz, gamma, basis: SpinBasis) -> sp.csr_matrix:
    return ansatz.hamiltonian_at(gamma, basis)
