import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hamdesign.hilbert import enumerate_basis
from hamdesign.models import MODEL_ZOO, build_model, local_dim_of, spin_dot
from hamdesign.operators import (PAULI, HamiltonianAnsatz, OperatorBasis, OperatorError, OperatorSum,
                                 OperatorTerm, ParametrizationMap, SectorViolation, assemble_sparse,
                                 hamiltonian_at, identity_sum, matvec, product_operator, site_operator,
                                 spin_matrices)

from conftest import dense_product


def test_identity_term_assembles_to_identity():
    for basis in (enumerate_basis(3, 2), enumerate_basis(4, 2, 0), enumerate_basis(2, 3)):
        m = assemble_sparse(identity_sum(), basis)
        assert np.array_equal(m.toarray(), np.eye(basis.dim))


def test_sigma_z_on_site_zero():
    m = assemble_sparse(site_operator(0, PAULI["Z"]), enumerate_basis(2, 2))
    assert np.array_equal(m.toarray(), np.diag([1.0, 1.0, -1.0, -1.0]))


def test_heisenberg_bond_spectrum():
    m = assemble_sparse(spin_dot(0, 1, 2), enumerate_basis(2, 2)).toarray()
    assert np.allclose(np.linalg.eigvalsh(m), [-0.75, 0.25, 0.25, 0.25], atol=1e-14)


def test_spin_matrices_algebra():
    for d in (2, 3, 4):
        s = spin_matrices(d)
        S = (d - 1) / 2
        casimir = s["Sx"] @ s["Sx"] + s["Sy"] @ s["Sy"] + s["Sz"] @ s["Sz"]
        assert np.allclose(casimir, S * (S + 1) * np.eye(d))
        assert np.allclose(s["Sx"] @ s["Sy"] - s["Sy"] @ s["Sx"], 1j * s["Sz"])


def _random_sum(rng, n, d, n_terms, hermitian=True):
    terms = []
    for _ in range(n_terms):
        k = rng.integers(1, min(3, n) + 1)
        sites = rng.choice(n, size=k, replace=False)
        factors = []
        for s in sites:
            a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            factors.append((int(s), a))
        terms.append(OperatorTerm(tuple(factors), complex(rng.standard_normal())))
    op = OperatorSum(tuple(terms), hermitian=False)
    if hermitian:
        adj = OperatorSum(tuple(OperatorTerm(tuple((s, m.conj().T) for s, m in t.factors),
                                             np.conj(t.coefficient)) for t in terms), hermitian=False)
        op = OperatorSum((op + adj).terms, hermitian=True)
    return op, terms


def _dense_sum(terms, n, d):
    return sum(t.coefficient * dense_product(t.factors, n, d) for t in terms)


@pytest.mark.parametrize("seed", range(50))
def test_sparse_matches_dense_for_random_sums(seed):
    rng = np.random.default_rng(seed)
    n, d = [(2, 2), (3, 2), (4, 2), (5, 2), (6, 2), (7, 2), (8, 2), (2, 3), (3, 3), (4, 3), (5, 3)][seed % 11]
    op, terms = _random_sum(rng, n, d, int(rng.integers(1, 6)), hermitian=bool(seed % 2))
    dense = _dense_sum(op.terms, n, d)
    m = assemble_sparse(op, enumerate_basis(n, d))
    assert m.shape == dense.shape and m.shape[0] <= 256
    assert np.max(np.abs(m.toarray() - dense)) < 1e-12


def test_csr_layout_is_canonical():
    m = assemble_sparse(spin_dot(0, 1, 2) + spin_dot(0, 1, 2), enumerate_basis(3, 2))
    assert isinstance(m, sp.csr_matrix)
    assert m.has_sorted_indices and m.has_canonical_format
    assert np.all(m.data != 0)


def test_sector_assembly_matches_dense_projection():
    n = 6
    op = spin_dot(0, 1, 2) + spin_dot(2, 5, 2) + site_operator(3, spin_matrices(2)["Sz"], 0.3)
    dense = _dense_sum(op.terms, n, 2)
    for sz in (-1, 0, 2):
        b = enumerate_basis(n, 2, sz)
        sub = dense[np.ix_(b.full_index, b.full_index)]
        assert np.max(np.abs(assemble_sparse(op, b).toarray() - sub)) < 1e-12


def test_sector_violation_names_offending_term():
    b = enumerate_basis(4, 2, 0)
    op = OperatorSum((product_operator([(1, PAULI["X"])]).terms[0],), label="field")
    with pytest.raises(SectorViolation, match=r"field.*\[1\]|\[1\].*field"):
        assemble_sparse(op, b)


def test_sector_leak_cancelling_between_terms_is_allowed():
    # Sx Sx + Sy Sy conserves Sz although each product alone does not
    s = spin_matrices(2)
    op = product_operator([(0, s["Sx"]), (1, s["Sx"])]) + product_operator([(0, s["Sy"]), (1, s["Sy"])])
    b = enumerate_basis(2, 2, 0)
    m = assemble_sparse(op, b).toarray()
    assert np.allclose(m, [[0, 0.5], [0.5, 0]])


def test_hermitian_flag_is_verified():
    op = OperatorSum(product_operator([(0, PAULI["X"] + 1j * PAULI["Y"])]).terms, hermitian=True, label="raise")
    with pytest.raises(OperatorError, match="hermitian"):
        assemble_sparse(op, enumerate_basis(2, 2))
    m = assemble_sparse(OperatorSum(op.terms, hermitian=False), enumerate_basis(2, 2))
    assert m.shape == (4, 4)


def test_site_outside_basis_rejected():
    with pytest.raises(OperatorError):
        assemble_sparse(site_operator(3, PAULI["Z"]), enumerate_basis(2, 2))


def test_term_rejects_repeated_sites_but_product_merges():
    with pytest.raises(OperatorError):
        OperatorTerm(((0, PAULI["X"]), (0, PAULI["Z"])))
    t = OperatorTerm(((0, PAULI["X"]),)) @ OperatorTerm(((0, PAULI["Z"]),))
    assert np.allclose(t.factors[0][1], PAULI["X"] @ PAULI["Z"])


def test_matvec_examples(rng):
    v = rng.standard_normal(5)
    assert np.allclose(matvec(sp.identity(5, format="csr"), v), v)
    assert np.allclose(matvec(sp.diags([1.0, 2.0]).tocsr(), np.ones(2)), [1, 2])
    H = sp.random(200, 200, density=0.05, random_state=1, format="csr")
    assert np.allclose(matvec(H, v[:1].repeat(200)), H.toarray() @ v[:1].repeat(200))
    with pytest.raises(OperatorError):
        matvec(H, np.ones(3))


def test_operator_basis_invariants():
    op = identity_sum()
    with pytest.raises(OperatorError):
        OperatorBasis((), ())
    with pytest.raises(OperatorError):
        OperatorBasis((op, op), ("a", "a"))


# -- parametrizations --------------------------------------------------------


def _two_op_ansatz():
    ops = OperatorBasis((site_operator(0, PAULI["Z"]), product_operator([(0, PAULI["X"]), (1, PAULI["X"])])),
                        ("Z0", "XX"))
    return HamiltonianAnsatz.fixed(ops)


def test_linear_unit_vector_and_zero():
    a = _two_op_ansatz()
    b = enumerate_basis(2, 2)
    O = a.operator_matrices(b)
    assert np.allclose(hamiltonian_at(a, [1.0, 0.0], b).toarray(), O[0].toarray())
    assert np.allclose(hamiltonian_at(a, [0.0, 0.0], b).toarray(), 0)


def test_polynomial_map_square():
    pm = ParametrizationMap.polynomial([[(1.0, (2,))], [(0.0, (0,))]], n_params=1)
    a = _two_op_ansatz().with_map(pm)
    b = enumerate_basis(2, 2)
    assert np.allclose(a.hamiltonian_at([2.0], b).toarray(), 4 * a.operator_matrices(b)[0].toarray())


def test_map_validation():
    with pytest.raises(OperatorError):
        ParametrizationMap("cubic", 1, 1)
    with pytest.raises(OperatorError):
        ParametrizationMap("linear", 2, 3)
    with pytest.raises(OperatorError):
        ParametrizationMap.linear(2, box=[(0, 1), (2, 1)])
    with pytest.raises(OperatorError):
        ParametrizationMap.polynomial([[(1.0, (1, 0))]], n_params=1)
    pm = ParametrizationMap.linear(2)
    with pytest.raises(OperatorError):
        pm([1.0, np.nan])
    with pytest.raises(OperatorError):
        pm([1.0])
    with pytest.raises(OperatorError):
        _two_op_ansatz().with_map(ParametrizationMap.linear(3))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_polynomial_map_finite_on_box(seed):
    rng = np.random.default_rng(seed)
    table = [[(float(rng.normal()), tuple(int(k) for k in rng.integers(0, 5, 2))) for _ in range(3)]
             for _ in range(4)]
    pm = ParametrizationMap.polynomial(table, 2, box=[(-1, 1), (0, 2)])
    p = rng.uniform([-1, 0], [1, 2])
    c = pm(p)
    assert c.shape == (4,) and np.all(np.isfinite(c))
    expected = [sum(coef * p[0] ** pw[0] * p[1] ** pw[1] for coef, pw in row) for row in table]
    assert np.allclose(c, expected)


def test_linearity_of_linear_ansatz(rng):
    a = build_model("pauli_strings_k_local", {"k": 2, "max_range": 2})
    b = enumerate_basis(5, 2, None, "periodic")
    g1, g2 = rng.standard_normal((2, a.n_params))
    lhs = a.hamiltonian_at(g1 + g2, b) - a.hamiltonian_at(g1, b) - a.hamiltonian_at(g2, b)
    assert abs(lhs).max() < 1e-12


def test_cached_assembly_matches_direct_sum(rng):
    a = build_model("heisenberg_bilinear_biquadratic", {"terms": ["bilinear", "biquadratic", "bilinear_nnn"]})
    b = enumerate_basis(5, 3, 1, "periodic")
    g = rng.standard_normal(3)
    direct = sum(gi * m for gi, m in zip(g, a.operator_matrices(b)))
    assert abs(a.hamiltonian_at(g, b) - direct).max() < 1e-12


@pytest.mark.parametrize("name, params, n, sector", [
    ("pauli_strings_k_local", {"k": 3, "max_range": 2}, 6, None),
    ("heisenberg_bilinear_biquadratic", {}, 5, 0),
    ("j1_j2", {}, 8, 0),
    ("transverse_field_ising", {"longitudinal": True}, 7, None),
])
def test_zoo_models_hermitian_at_random_gamma(name, params, n, sector, rng):
    a = build_model(name, params)
    assert name in MODEL_ZOO
    for boundary in ("open", "periodic"):
        b = enumerate_basis(n, local_dim_of(name, params), sector, boundary)
        H = a.hamiltonian_at(rng.standard_normal(a.n_params), b)
        assert abs(H - H.conj().T).max() < 1e-12
