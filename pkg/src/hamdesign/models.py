"""Named operator families for spin chains.

Every constructor returns a :class:`HamiltonianAnsatz` whose operator basis is
rebuilt for any chain length. Translation-invariant sums over periodic chains
keep every translate of a window, so short rings may count a bond twice.
"""
from __future__ import annotations

import itertools
from functools import partial

import numpy as np

from .operators import (PAULI, HamiltonianAnsatz, OperatorBasis, OperatorError, OperatorSum,
                        ParametrizationMap, product_operator, spin_matrices)


def bonds(n_sites: int, distance: int, boundary: str) -> list[tuple[int, int]]:
    if boundary == "periodic":
        if distance >= n_sites:
            return []
        return [(i, (i + distance) % n_sites) for i in range(n_sites)]
    return [(i, i + distance) for i in range(n_sites - distance)]


def spin_dot(i: int, j: int, local_dim: int) -> OperatorSum:
    """S_i . S_j written with ladder operators so every term conserves total S_z."""
    s = spin_matrices(local_dim)
    return (product_operator([(i, s["Sz"]), (j, s["Sz"])])
            + product_operator([(i, s["Sp"]), (j, s["Sm"])], 0.5)
            + product_operator([(i, s["Sm"]), (j, s["Sp"])], 0.5))


def _labelled(op: OperatorSum, label: str) -> OperatorSum:
    return OperatorSum(op.terms, op.hermitian, label)


def _summed(parts) -> OperatorSum:
    total = OperatorSum(())
    for p in parts:
        total = total + p
    return total


# ---------------------------------------------------------------------------
# pauli strings


def pauli_window_labels(k: int, max_range: int, real_only: bool = False) -> list[str]:
    """Window strings like ``"X"``, ``"XZ"``, ``"X.Z"`` with at most ``k`` non-identity letters."""
    labels = []
    for length in range(1, max_range + 2):
        for letters in itertools.product("XYZ.", repeat=length):
            if letters[0] == "." or letters[-1] == ".":
                continue
            weight = sum(ch != "." for ch in letters)
            if weight > k:
                continue
            if real_only and letters.count("Y") % 2:
                continue
            labels.append("".join(letters))
    return labels


def pauli_window_sum(label: str, n_sites: int, boundary: str) -> OperatorSum:
    length = len(label)
    if boundary == "periodic":
        starts = range(n_sites) if length <= n_sites else []
    else:
        starts = range(n_sites - length + 1)
    parts = []
    for i in starts:
        factors = [((i + j) % n_sites, PAULI[ch]) for j, ch in enumerate(label) if ch != "."]
        parts.append(product_operator(factors))
    return _labelled(_summed(parts), label)


def _pauli_builder(labels, n_sites, boundary, local_dim):
    if local_dim != 2:
        raise OperatorError("pauli strings need local_dim = 2")
    return OperatorBasis([pauli_window_sum(lb, n_sites, boundary) for lb in labels], labels)


def pauli_strings_k_local(k: int = 2, max_range: int | None = None, real_only: bool = False,
                          labels=None) -> HamiltonianAnsatz:
    """Translation-invariant sums of Pauli strings with at most ``k`` non-identity sites.

    ``max_range`` bounds the distance between the first and last non-identity
    site (default ``k - 1``, i.e. contiguous windows). ``labels`` picks an
    explicit subset/ordering.
    """
    if max_range is None:
        max_range = k - 1
    all_labels = pauli_window_labels(k, max_range, real_only)
    if labels is None:
        labels = all_labels
    else:
        labels = list(labels)
        unknown = [lb for lb in labels if lb not in all_labels]
        if unknown:
            raise OperatorError(f"labels {unknown} not in the k={k}, max_range={max_range} family")
    return HamiltonianAnsatz(partial(_pauli_builder, tuple(labels)), labels, name="pauli_strings_k_local")


# ---------------------------------------------------------------------------
# spin models


def _bilinear(n_sites, boundary, local_dim, distance=1):
    return _summed(spin_dot(i, j, local_dim) for i, j in bonds(n_sites, distance, boundary))


def _biquadratic(n_sites, boundary, local_dim):
    parts = []
    for i, j in bonds(n_sites, 1, boundary):
        b = spin_dot(i, j, local_dim)
        parts.append(b @ b)
    return _summed(parts)


_BBQ_TERMS = {
    "bilinear": lambda n, bc, d: _bilinear(n, bc, d, 1),
    "biquadratic": _biquadratic,
    "bilinear_nnn": lambda n, bc, d: _bilinear(n, bc, d, 2),
}


def _bbq_builder(terms, local_dim_expected, n_sites, boundary, local_dim):
    if local_dim != local_dim_expected:
        raise OperatorError(f"model built for local_dim={local_dim_expected}, basis has {local_dim}")
    ops = [_labelled(_BBQ_TERMS[t](n_sites, boundary, local_dim), t) for t in terms]
    return OperatorBasis(ops, terms)


def heisenberg_bilinear_biquadratic(spin: float = 1.0,
                                    terms=("bilinear", "biquadratic")) -> HamiltonianAnsatz:
    """Sum_i S_i.S_{i+1} and sum_i (S_i.S_{i+1})^2; ``bilinear_nnn`` adds S_i.S_{i+2}."""
    terms = tuple(terms)
    for t in terms:
        if t not in _BBQ_TERMS:
            raise OperatorError(f"unknown bilinear-biquadratic term {t!r}")
    d = int(round(2 * spin + 1))
    return HamiltonianAnsatz(partial(_bbq_builder, terms, d), terms, name="heisenberg_bilinear_biquadratic")


def _j1j2_builder(local_dim_expected, n_sites, boundary, local_dim):
    if local_dim != local_dim_expected:
        raise OperatorError(f"model built for local_dim={local_dim_expected}, basis has {local_dim}")
    return OperatorBasis([_labelled(_bilinear(n_sites, boundary, local_dim, 1), "J1"),
                          _labelled(_bilinear(n_sites, boundary, local_dim, 2), "J2")], ("J1", "J2"))


def j1_j2(spin: float = 0.5) -> HamiltonianAnsatz:
    """Nearest and next-nearest neighbour Heisenberg couplings."""
    d = int(round(2 * spin + 1))
    return HamiltonianAnsatz(partial(_j1j2_builder, d), ("J1", "J2"), name="j1_j2")


def _tfi_builder(longitudinal, n_sites, boundary, local_dim):
    labels = ["ZZ", "X"] + (["Z"] if longitudinal else [])
    return _pauli_builder(tuple(labels), n_sites, boundary, local_dim)


def transverse_field_ising(longitudinal: bool = False) -> HamiltonianAnsatz:
    """Sum Z_i Z_{i+1}, sum X_i and optionally sum Z_i (Pauli normalization)."""
    labels = ["ZZ", "X"] + (["Z"] if longitudinal else [])
    return HamiltonianAnsatz(partial(_tfi_builder, longitudinal), labels, name="transverse_field_ising")


MODEL_ZOO = {
    "pauli_strings_k_local": pauli_strings_k_local,
    "heisenberg_bilinear_biquadratic": heisenberg_bilinear_biquadratic,
    "j1_j2": j1_j2,
    "transverse_field_ising": transverse_field_ising,
}


def local_dim_of(name: str, params: dict) -> int:
    if name in ("heisenberg_bilinear_biquadratic", "j1_j2"):
        default = 1.0 if name == "heisenberg_bilinear_biquadratic" else 0.5
        return int(round(2 * params.get("spin", default) + 1))
    return 2


def build_model(name: str, params: dict | None = None,
                parametrization: ParametrizationMap | None = None) -> HamiltonianAnsatz:
    if name not in MODEL_ZOO:
        raise OperatorError(f"unknown model {name!r}; available: {sorted(MODEL_ZOO)}")
    ansatz = MODEL_ZOO[name](**(params or {}))
    if parametrization is not None:
        ansatz = ansatz.with_map(parametrization)
    return ansatz


# ---------------------------------------------------------------------------
# symmetry generators


def total_sz(n_sites: int, local_dim: int) -> OperatorSum:
    sz = spin_matrices(local_dim)["Sz"]
    return _summed(product_operator([(i, sz)]) for i in range(n_sites))


def total_sz_squared(n_sites: int, local_dim: int) -> OperatorSum:
    t = total_sz(n_sites, local_dim)
    return _labelled(t @ t, "Sz_total^2")


def total_spin_squared(n_sites: int, local_dim: int) -> OperatorSum:
    """Casimir S_tot^2 = sum_{i,j} S_i.S_j."""
    s = spin_matrices(local_dim)
    parts = []
    for i in range(n_sites):
        for j in range(n_sites):
            if i == j:
                sq = s["Sx"] @ s["Sx"] + s["Sy"] @ s["Sy"] + s["Sz"] @ s["Sz"]
                parts.append(product_operator([(i, sq)]))
            else:
                parts.append(spin_dot(i, j, local_dim))
    return _labelled(_summed(parts), "S_total^2")


SYMMETRY_OPERATORS = {
    "total_sz_squared": total_sz_squared,
    "total_spin_squared": total_spin_squared,
}


def coefficient_vector(ansatz: HamiltonianAnsatz, values: dict) -> np.ndarray:
    """Dense coefficient vector from a ``{label: value}`` mapping."""
    out = np.zeros(len(ansatz.labels))
    for label, v in values.items():
        if label not in ansatz.labels:
            raise OperatorError(f"unknown operator label {label!r}")
        out[ansatz.labels.index(label)] = v
    return out
