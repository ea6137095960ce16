"""Weighted multi-size loss over Hamiltonian observables, with gauge fixing."""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .hilbert import SpinBasis, WaveFunction, best_vector_in_span, kl_divergence, subspace_overlap
from .operators import HamiltonianAnsatz
from .spectra import eigs_low, energy_variance, relative_energy_variance

BOX_STIFFNESS = 1e4

SIZE_KINDS = ("overlap", "kl", "energy_variance", "ground_energy", "gap", "symmetry_penalty", "target_value")
GLOBAL_KINDS = ("extrapolated_gap", "regularization_l1", "box_penalty")
REFERENCE_KINDS = ("overlap", "kl", "energy_variance")
TARGET_OBSERVABLES = ("ground_energy", "gap", "overlap", "kl", "energy_variance", "symmetry",
                      "extrapolated_gap")


class LossError(ValueError):
    pass


class GaugeError(LossError):
    pass


# ---------------------------------------------------------------------------
# elementary terms


def regularization_l1(gamma, gamma_ref=None) -> float:
    gamma = np.asarray(gamma, dtype=float)
    ref = np.zeros_like(gamma) if gamma_ref is None else np.asarray(gamma_ref, dtype=float)
    if ref.shape != gamma.shape:
        raise LossError(f"reference point has shape {ref.shape}, parameters {gamma.shape}")
    return float(np.sum(np.abs(gamma - ref)))


def target_value_term(value: float, target: float) -> float:
    return float((value - target) ** 2)


def box_penalty(p, box, stiffness: float = BOX_STIFFNESS) -> float:
    """Zero inside ``box``; ``stiffness * dist^2`` summed over coordinates outside."""
    p = np.asarray(p, dtype=float)
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    dist = np.maximum(lo - p, 0) + np.maximum(p - hi, 0)
    return float(stiffness * np.sum(dist ** 2))


def extrapolate_gap(gaps: dict) -> tuple[float, float]:
    """Intercept of the least-squares line gap(N) = a + b / N, and the RMS fit residual."""
    if len(gaps) < 2:
        raise LossError(f"gap extrapolation needs at least 2 sizes, got {sorted(gaps)}")
    sizes = np.array(sorted(gaps), dtype=float)
    y = np.array([gaps[n] for n in sorted(gaps)], dtype=float)
    A = np.column_stack([np.ones_like(sizes), 1.0 / sizes])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), resid


# ---------------------------------------------------------------------------
# gauges


class NoGauge:
    kind = "none"

    def n_reduced(self, n_full: int) -> int:
        return n_full

    def reduce(self, full):
        return np.array(full, dtype=float)

    def expand(self, reduced):
        return np.array(reduced, dtype=float)

    def project(self, full):
        return np.array(full, dtype=float)

    def to_dict(self):
        return {"kind": "none"}


@dataclass(frozen=True)
class FreezeOne:
    """Fix one coordinate; the optimizer sees the remaining ones."""

    index: int
    value: float = 1.0
    kind = "freeze_one"

    def n_reduced(self, n_full: int) -> int:
        if not 0 <= self.index < n_full:
            raise GaugeError(f"frozen index {self.index} outside [0, {n_full})")
        return n_full - 1

    def reduce(self, full):
        return np.delete(np.asarray(full, dtype=float), self.index)

    def expand(self, reduced):
        return np.insert(np.asarray(reduced, dtype=float), self.index, self.value)

    def project(self, full):
        return np.array(full, dtype=float)

    def to_dict(self):
        return {"kind": "freeze_one", "index": self.index, "value": self.value}


@dataclass(frozen=True)
class L1Sum:
    """Fix sum_m |gamma_m| = total by rescaling."""

    total: float = 1.0
    kind = "l1_sum"

    def n_reduced(self, n_full: int) -> int:
        return n_full

    def reduce(self, full):
        return self.project(full)

    def expand(self, reduced):
        return np.array(reduced, dtype=float)

    def project(self, full):
        full = np.asarray(full, dtype=float)
        norm = np.sum(np.abs(full))
        if norm < 1e-14:
            raise GaugeError("l1_sum gauge is undefined at gamma = 0")
        return full * (self.total / norm)

    def to_dict(self):
        return {"kind": "l1_sum", "total": self.total}


def make_gauge(spec: dict | None):
    spec = dict(spec or {"kind": "none"})
    kind = spec.pop("kind", "none")
    if kind == "none":
        return NoGauge()
    if kind == "freeze_one":
        return FreezeOne(int(spec["index"]), float(spec.get("value", 1.0)))
    if kind == "l1_sum":
        return L1Sum(float(spec.get("total", 1.0)))
    raise GaugeError(f"unknown gauge {kind!r}")


def apply_gauge(gauge, full_gamma):
    """Reduced optimization coordinates of a full parameter vector."""
    return gauge.reduce(full_gamma)


# ---------------------------------------------------------------------------
# loss specification


def size_weights(bases: dict, mode: str = "hilbert", importance: dict | None = None) -> dict:
    """G_N per size: proportional to Hilbert dimension (largest -> 1) or uniform, times importance."""
    importance = importance or {}
    if mode == "hilbert":
        dmax = max(b.dim for b in bases.values())
        g = {n: b.dim / dmax for n, b in bases.items()}
    elif mode == "uniform":
        g = {n: 1.0 for n in bases}
    else:
        raise LossError(f"unknown size-weight mode {mode!r}")
    return {n: g[n] * float(importance.get(n, 1.0)) for n in sorted(g)}


@dataclass
class LossTerm:
    kind: str
    weight: float = 1.0
    size_weights: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)  # size -> WaveFunction
    target: float | None = None
    observable: str | None = None
    gamma_ref: np.ndarray | None = None
    symmetry: dict = field(default_factory=dict)  # size -> sparse matrix
    box: tuple | None = None
    raw: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in SIZE_KINDS + GLOBAL_KINDS:
            raise LossError(f"unknown loss term kind {self.kind!r}")
        if not self.label:
            self.label = self.kind if self.kind != "target_value" else f"target_{self.observable}"
        if self.kind in REFERENCE_KINDS:
            missing = [n for n in self.size_weights if n not in self.references]
            if missing:
                raise LossError(f"term {self.label}: no reference wavefunction for sizes {missing}")
        if self.kind == "symmetry_penalty":
            missing = [n for n in self.size_weights if n not in self.symmetry]
            if missing:
                raise LossError(f"term {self.label}: no symmetry operator for sizes {missing}")
        if self.kind == "target_value":
            if self.observable not in TARGET_OBSERVABLES:
                raise LossError(f"target_value needs observable in {TARGET_OBSERVABLES}")
            if self.target is None or not math.isfinite(self.target):
                raise LossError("target_value needs a finite target")
            if self.observable in ("overlap", "kl", "energy_variance") and \
                    any(n not in self.references for n in self.size_weights):
                raise LossError(f"term {self.label}: target on {self.observable} needs references")
        if self.kind == "box_penalty" and self.box is None:
            raise LossError("box_penalty term needs a box")
        if self.kind == "extrapolated_gap" and len(self.size_weights) < 2:
            raise LossError("extrapolated_gap needs at least 2 sizes")

    @property
    def per_size(self) -> bool:
        if self.kind == "target_value":
            return self.observable != "extrapolated_gap"
        return self.kind in SIZE_KINDS

    @property
    def needs_spectrum(self) -> bool:
        if self.kind == "target_value":
            return self.observable != "energy_variance"
        return self.kind in ("overlap", "kl", "ground_energy", "gap", "symmetry_penalty", "extrapolated_gap")


@dataclass
class LossBreakdown:
    total: float
    contributions: OrderedDict  # column name -> weighted contribution
    observables: dict  # size -> {name: value}
    parameters: np.ndarray  # full parameter vector used

    def as_row(self) -> dict:
        return dict(self.contributions)


@dataclass
class LossSpec:
    terms: list
    ansatz: HamiltonianAnsatz
    bases: dict  # size -> SpinBasis
    gauge: object = field(default_factory=NoGauge)

    def __post_init__(self):
        if not self.terms:
            raise LossError("loss needs at least one term")
        labels = [t.label for t in self.terms]
        if len(set(labels)) != len(labels):
            raise LossError(f"duplicate term labels {labels}")
        for t in self.terms:
            unknown = [n for n in t.size_weights if n not in self.bases]
            if unknown:
                raise LossError(f"term {t.label} references sizes {unknown} without a basis")
            for n, ref in t.references.items():
                if n in self.bases and ref.basis != self.bases[n]:
                    raise LossError(f"term {t.label}: reference for N={n} lives in a different basis")
        self.gauge.n_reduced(self.ansatz.n_params)

    @property
    def n_full(self) -> int:
        return self.ansatz.n_params

    @property
    def n_reduced(self) -> int:
        return self.gauge.n_reduced(self.n_full)

    def full_parameters(self, reduced) -> np.ndarray:
        reduced = np.asarray(reduced, dtype=float)
        if reduced.shape != (self.n_reduced,):
            raise LossError(f"expected {self.n_reduced} reduced parameters, got shape {reduced.shape}")
        if not np.all(np.isfinite(reduced)):
            raise LossError(f"non-finite parameters {reduced}")
        return self.gauge.project(self.gauge.expand(reduced))

    def columns(self) -> list[str]:
        cols = []
        for n in sorted(self.bases):
            cols += [f"{t.label}@{n}" for t in self.terms if t.per_size and n in t.size_weights]
        cols += [t.label for t in self.terms if not t.per_size]
        return cols


def _size_observables(spec: LossSpec, n: int, p: np.ndarray) -> tuple:
    basis = spec.bases[n]
    H = spec.ansatz.hamiltonian_at(p, basis)
    terms = [t for t in spec.terms if n in t.size_weights]
    report = None
    if any(t.needs_spectrum for t in terms):
        report = eigs_low(H, 1, basis)
    obs = {}
    if report is not None:
        obs.update(e0=report.e0, gap=report.gap, degeneracy=report.ground_degeneracy,
                   method=report.method)
    return H, report, obs


def _reference_observables(H, report, ref: WaveFunction) -> dict:
    out = {"energy_variance": energy_variance(H, ref)}
    rel = relative_energy_variance(H, ref)
    out["relative_energy_variance"] = rel
    if report is not None:
        out["overlap"] = subspace_overlap(ref, report.ground_space)
        out["kl"] = kl_divergence(ref, best_vector_in_span(ref, report.ground_space))
    return out


def _symmetry_value(G, report) -> float:
    vals = [float(np.vdot(v.amplitudes, G @ v.amplitudes).real) for v in report.ground_space]
    return float(np.mean(vals))


def evaluate_loss(spec: LossSpec, gamma) -> LossBreakdown:
    """Loss at reduced parameters ``gamma``; contributions ordered by size, then term."""
    p = spec.full_parameters(gamma)
    contributions = OrderedDict()
    observables = {}
    gaps = {}
    for n in sorted(spec.bases):
        terms = [t for t in spec.terms if t.per_size and n in t.size_weights]
        needs_gap = any(not t.per_size and t.needs_spectrum and n in t.size_weights for t in spec.terms)
        if not terms and not needs_gap:
            continue
        try:
            H, report, obs = _size_observables(spec, n, p)
        except Exception as exc:  # back-end failure
            names = ", ".join(t.label for t in terms) or "extrapolated_gap"
            raise LossError(f"evaluation failed at N={n} (terms {names}): {exc}") from exc
        ref_cache = {}
        if report is not None:
            gaps[n] = report.gap
        for t in terms:
            ref = t.references.get(n)
            if ref is not None and id(ref) not in ref_cache:
                ref_cache[id(ref)] = _reference_observables(H, report, ref)
            robs = ref_cache.get(id(ref), {})
            if ref is not None and "reference" not in obs:
                obs.update(robs)
                obs["reference"] = t.label
            value = _term_value(t, n, report, robs)
            if t.kind == "symmetry_penalty":
                obs[f"symmetry:{t.label}"] = value
            contrib = t.weight * t.size_weights[n] * value
            if not math.isfinite(contrib):
                raise LossError(f"non-finite contribution from term {t.label} at N={n}: {contrib}")
            contributions[f"{t.label}@{n}"] = contrib
        observables[n] = obs
    for t in spec.terms:
        if t.per_size:
            continue
        if t.kind == "regularization_l1":
            value = regularization_l1(p, t.gamma_ref)
        elif t.kind == "box_penalty":
            value = box_penalty(p, t.box)
        else:
            value, _ = extrapolate_gap({n: gaps[n] for n in t.size_weights})
            if t.kind == "target_value":
                value = target_value_term(value, t.target)
        contrib = t.weight * value
        if not math.isfinite(contrib):
            raise LossError(f"non-finite contribution from term {t.label}: {contrib}")
        contributions[t.label] = contrib
    return LossBreakdown(math.fsum(contributions.values()), contributions, observables, p)


def _term_value(t: LossTerm, n: int, report, robs: dict) -> float:
    kind = t.kind
    if kind == "overlap":
        return robs["overlap"] if t.raw else 1.0 - robs["overlap"]
    if kind == "kl":
        return robs["kl"]
    if kind == "energy_variance":
        return robs["energy_variance"]
    if kind == "ground_energy":
        return report.e0
    if kind == "gap":
        return report.gap
    if kind == "symmetry_penalty":
        return _symmetry_value(t.symmetry[n], report)
    # target_value on a per-size observable
    obs = t.observable
    if obs == "ground_energy":
        value = report.e0
    elif obs == "gap":
        value = report.gap
    elif obs == "symmetry":
        value = _symmetry_value(t.symmetry[n], report)
    else:
        value = robs[obs]
    return target_value_term(value, t.target)


class LossObjective:
    """Callable scalar loss on reduced parameters with an evaluation counter.

    Recent breakdowns are memoized by parameter bytes so the optimizer can log
    per-term columns for accepted points without re-running the back-end.
    """

    def __init__(self, spec: LossSpec, cache_size: int = 512):
        self.spec = spec
        self.n_evals = 0
        self._cache = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def breakdown(self, gamma) -> LossBreakdown:
        gamma = np.asarray(gamma, dtype=float)
        key = gamma.tobytes()
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        result = evaluate_loss(self.spec, gamma)
        with self._lock:
            self.n_evals += 1
            self._cache[key] = result
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return result

    def __call__(self, gamma) -> float:
        return self.breakdown(gamma).total

    def describe(self, gamma) -> dict:
        return self.breakdown(gamma).as_row()

    def project(self, gamma):
        """Gauge projection in reduced coordinates (identity unless l1_sum)."""
        if isinstance(self.spec.gauge, L1Sum):
            return self.spec.gauge.project(gamma)
        return np.asarray(gamma, dtype=float)
