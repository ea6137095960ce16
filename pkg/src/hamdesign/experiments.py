"""Experiment drivers: recover, extrapolate, scan and bench."""
from __future__ import annotations

import contextlib
import logging
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import persist
from .config import ConfigError, ExperimentConfig, ScanConfig, TermConfig
from .hilbert import BasisError, enumerate_basis, best_vector_in_span, kl_divergence, subspace_overlap
from .loss import (GLOBAL_KINDS, REFERENCE_KINDS, L1Sum, FreezeOne, LossError, LossObjective, LossSpec,
                   LossTerm, make_gauge, size_weights)
from .models import SYMMETRY_OPERATORS, build_model, local_dim_of
from .operators import OperatorError, ParametrizationMap, assemble_sparse
from .optimizer import CgdConfig, cgd_minimize, draw_starts, steepest_descent_minimize
from .references import (PlantedProblem, PlantedProblemError, ReferenceError, generate_planted_problem,
                         make_reference_state, read_amplitudes)
from .spectra import eigs_low, energy_variance, relative_energy_variance

log = logging.getLogger(__name__)

CONVENTIONS = {
    "overlap": "norm of the reference projected onto the ground multiplet",
    "kl": "against the ground-multiplet vector of maximal overlap",
    "symmetry_penalty": "mean over the ground multiplet",
    "degeneracy_tolerance": "1e-9 * max(1, |E0|)",
}


@contextlib.contextmanager
def _as_config_error(what: str):
    try:
        yield
    except ConfigError:
        raise
    except PlantedProblemError:
        raise
    except (OperatorError, BasisError, LossError, ReferenceError, KeyError, TypeError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


# ---------------------------------------------------------------------------
# problem construction


def build_parametrization(spec: dict | None, n_coeffs: int) -> ParametrizationMap | None:
    if spec is None:
        return None
    spec = dict(spec)
    kind = spec.pop("kind", "linear")
    box = spec.pop("box", None)
    if kind == "linear":
        if spec:
            raise ConfigError(f"linear parametrization: unknown keys {sorted(spec)}")
        return ParametrizationMap.linear(n_coeffs, box)
    if kind == "polynomial":
        table = spec.pop("table")
        n_params = spec.pop("n_params")
        if spec:
            raise ConfigError(f"polynomial parametrization: unknown keys {sorted(spec)}")
        rows = [[(float(c), tuple(pw)) for c, pw in row] for row in table]
        return ParametrizationMap.polynomial(rows, int(n_params), box)
    raise ConfigError(f"unknown parametrization kind {kind!r}")


def build_ansatz(model_cfg):
    params = dict(model_cfg.params or {})
    with _as_config_error(f"model {model_cfg.name!r}"):
        ansatz = build_model(model_cfg.name, params)
        pmap = build_parametrization(model_cfg.parametrization, len(ansatz.labels))
        if pmap is not None:
            ansatz = ansatz.with_map(pmap)
        return ansatz, local_dim_of(model_cfg.name, params)


@dataclass
class Problem:
    config: ExperimentConfig
    ansatz: object
    local_dim: int
    bases: dict  # every train and test size
    references: dict
    planted: PlantedProblem | None = None
    planted_labels: dict | None = None  # label -> planted coefficient
    importance: dict = field(default_factory=dict)  # size -> G_N multiplier

    @property
    def train_sizes(self) -> list:
        return sorted(self.config.sizes.train)

    @property
    def test_sizes(self) -> list:
        return sorted(self.config.sizes.test)


def build_problem(config: ExperimentConfig) -> Problem:
    mc = config.model
    ansatz, d = build_ansatz(mc)
    sizes = sorted(set(config.sizes.train) | set(config.sizes.test))
    with _as_config_error("hilbert space"):
        bases = {n: enumerate_basis(n, d, mc.sector, mc.boundary) for n in sizes}
    rc = config.reference
    planted, planted_labels = None, None
    with _as_config_error("reference"):
        if rc.source == "planted":
            host = ansatz
            host_bases = bases
            if rc.model is not None:
                host, hd = build_ansatz(rc.model)
                if hd != d or rc.model.boundary != mc.boundary or rc.model.sector != mc.sector:
                    raise ConfigError("reference.model must share local dimension, boundary and sector "
                                      "with the trained model")
                host_bases = {n: enumerate_basis(n, d, mc.sector, mc.boundary) for n in sizes}
            if host.map.kind != "linear":
                raise ConfigError("planted references need a linearly parametrized planting model")
            planted = generate_planted_problem(host, rc.support, config.seed, host_bases, rc.low, rc.high,
                                               rc.min_gap, rc.max_attempts)
            refs = {n: planted.references[n] for n in sizes}
            # the planting family may use an equal but distinct basis object
            refs = {n: type(r)(bases[n], r.amplitudes) for n, r in refs.items()}
            planted_labels = {host.labels[i]: float(planted.gamma_star[i]) for i in planted.support}
        elif rc.source == "named":
            refs = {n: make_reference_state(rc.name, n, bases[n]) for n in sizes}
        else:
            refs = {n: read_amplitudes(rc.files[n], bases[n]) for n in sizes}
    return Problem(config, ansatz, d, bases, refs, planted, planted_labels, dict(config.loss.importance))


def _resolve_gauge(gauge: dict, ansatz):
    g = dict(gauge or {"kind": "none"})
    if isinstance(g.get("index"), str):
        if ansatz.map.kind != "linear":
            raise ConfigError("gauge index by label needs a linear parametrization")
        if g["index"] not in ansatz.labels:
            raise ConfigError(f"gauge label {g['index']!r} not in {ansatz.labels}")
        g["index"] = ansatz.labels.index(g["index"])
    with _as_config_error("gauge"):
        return make_gauge(g)


def _make_term(problem: Problem, t: TermConfig, weights: dict) -> LossTerm:
    sizes = list(t.sizes) if t.sizes else problem.train_sizes
    kind = t.kind
    per_size = kind not in GLOBAL_KINDS or kind == "extrapolated_gap"
    sw = {n: weights[n] for n in sizes} if per_size else {}
    refs = {}
    if kind in REFERENCE_KINDS or (kind == "target_value" and t.observable in REFERENCE_KINDS):
        refs = {n: problem.references[n] for n in sizes}
    symmetry = {}
    if t.symmetry is not None:
        if t.symmetry not in SYMMETRY_OPERATORS:
            raise ConfigError(f"unknown symmetry operator {t.symmetry!r}; choose from {sorted(SYMMETRY_OPERATORS)}")
        build = SYMMETRY_OPERATORS[t.symmetry]
        symmetry = {n: assemble_sparse(build(n, problem.local_dim), problem.bases[n]) for n in sizes}
    gamma_ref = None if t.gamma_ref is None else np.asarray(t.gamma_ref, dtype=float)
    if gamma_ref is not None and gamma_ref.shape != (problem.ansatz.n_params,):
        raise ConfigError(f"gamma_ref has {gamma_ref.size} entries, model has {problem.ansatz.n_params} parameters")
    box = t.box if t.box is not None else problem.ansatz.map.box
    if kind == "box_penalty" and box is None:
        raise ConfigError("box_penalty needs a box (term.box or parametrization.box)")
    with _as_config_error(f"loss term {t.label or kind}"):
        return LossTerm(kind, float(t.weight), sw, refs, t.target, t.observable, gamma_ref, symmetry,
                        None if box is None else tuple(tuple(b) for b in box), bool(t.raw), t.label or "")


def build_loss_spec(problem: Problem, kinds=None) -> LossSpec:
    """LossSpec over the training sizes; ``kinds`` keeps only matching terms."""
    lc = problem.config.loss
    train = {n: problem.bases[n] for n in problem.train_sizes}
    with _as_config_error("size weights"):
        weights = size_weights(train, lc.size_weights, problem.importance)
    terms = [_make_term(problem, t, weights) for t in lc.terms if kinds is None or t.kind in kinds]
    if not terms:
        raise ConfigError("no loss terms selected")
    gauge = _resolve_gauge(lc.gauge, problem.ansatz)
    with _as_config_error("loss"):
        return LossSpec(terms, problem.ansatz, train, gauge)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(problem: Problem, params, sizes) -> dict:
    """Spectral and reference metrics of H(params) at each size."""
    out = {}
    for n in sizes:
        basis = problem.bases[n]
        H = problem.ansatz.hamiltonian_at(params, basis)
        rep = eigs_low(H, 1, basis)
        ref = problem.references[n]
        out[n] = {
            "dim": basis.dim,
            "overlap": subspace_overlap(ref, rep.ground_space),
            "kl": kl_divergence(ref, best_vector_in_span(ref, rep.ground_space)),
            "energy_variance": energy_variance(H, ref),
            "relative_energy_variance": relative_energy_variance(H, ref),
            "e0": rep.e0,
            "gap": rep.gap,
            "degeneracy": rep.ground_degeneracy,
            "method": rep.method,
        }
    return out


def planted_reduced(problem: Problem, spec: LossSpec):
    """Reduced coordinates of the planted optimum in the training gauge, if representable."""
    if problem.planted_labels is None or problem.ansatz.map.kind != "linear":
        return None
    labels = problem.ansatz.labels
    if any(lb not in labels for lb in problem.planted_labels):
        return None
    g = np.zeros(len(labels))
    for lb, v in problem.planted_labels.items():
        g[labels.index(lb)] = v
    gauge = spec.gauge
    if isinstance(gauge, FreezeOne):
        if g[gauge.index] == 0:
            return None
        g = g * (gauge.value / g[gauge.index])
    elif isinstance(gauge, L1Sum):
        g = gauge.project(g)
    return gauge.reduce(g)


# ---------------------------------------------------------------------------
# recovery


@dataclass
class RecoveryReport:
    mode: str
    name: str
    seed: int
    labels: list
    parameters: list
    coefficients: list
    train: dict
    test: dict
    final_loss: float
    contributions: dict
    termination: str
    n_steps: int
    n_evals: int
    escapes: int
    multistart: dict
    support: list | None = None
    off_support_l1: float | None = None
    off_support_fraction: float | None = None
    planted: dict | None = None
    representable: bool | None = None
    loss_at_planted: float | None = None
    importance: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    trace_file: str | None = None
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))
    trace: object = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "trace"}
        return d

    def dumps(self) -> str:
        return persist.dump_document(self.to_dict(), "recovery_report")

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RecoveryReport":
        doc = persist.load_document(text, "recovery_report")
        doc.pop("schema_version")
        doc.pop("kind")
        for key in ("train", "test", "importance"):
            doc[key] = {int(n): v for n, v in doc[key].items()}
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RecoveryReport":
        return cls.loads(Path(path).read_text())


@dataclass
class StagedTrace:
    main: object
    warmup: object | None
    start: np.ndarray


def _optimize(problem, spec, objective, start, cgd_cfg, executor=None, writer=None):
    opt = problem.config.optimizer
    kinds_present = {t.kind for t in spec.terms}
    warm = [k for k in opt.warmup_terms if k in kinds_present]
    tr_w = None
    if warm and opt.warmup_iters > 0 and set(warm) != kinds_present:
        spec_w = build_loss_spec(problem, kinds=set(warm))
        obj_w = LossObjective(spec_w)
        sink = None if writer is None else (lambda rec: writer.append([rec], "warmup"))
        tr_w = cgd_minimize(obj_w, start, replace(cgd_cfg, max_iters=opt.warmup_iters), project=obj_w.project,
                            describe=objective.describe, executor=executor, on_step=sink)
        start = tr_w.best_gamma
    sink = None if writer is None else (lambda rec: writer.append([rec], "main"))
    tr = cgd_minimize(objective, start, cgd_cfg, project=objective.project, describe=objective.describe,
                      executor=executor, on_step=sink)
    return StagedTrace(tr, tr_w, np.asarray(start))


def _starts(problem, spec) -> np.ndarray:
    opt = problem.config.optimizer
    dim = spec.n_reduced
    if opt.start is not None:
        start = np.asarray(opt.start, dtype=float)
        if start.ndim == 1:
            start = start[None, :]
        if start.shape[1] != dim:
            raise ConfigError(f"optimizer.start has {start.shape[1]} coordinates, domain has {dim}")
        return start[:opt.n_starts]
    lo, hi = opt.start_box
    return draw_starts(opt.n_starts, [(lo, hi)] * dim, np.random.default_rng(problem.config.seed))


def run_recover(config: ExperimentConfig, out_dir=None, executor=None, timing: bool = True,
                mode: str = "recover", importance: dict | None = None) -> RecoveryReport:
    problem = build_problem(config)
    if importance is not None:
        problem.importance = dict(importance)
    spec = build_loss_spec(problem)
    objective = LossObjective(spec)
    cgd_cfg = config.optimizer.cgd(config.seed)
    starts = _starts(problem, spec)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.yaml")

    runs = []
    for i, start in enumerate(starts):
        writer = None
        if out is not None:
            writer = persist.TraceWriter(out / "traces" / f"start_{i}.csv", spec.columns(), spec.n_reduced, timing)
        run = _optimize(problem, spec, objective, start, replace(cgd_cfg, seed=config.seed + i), executor, writer)
        runs.append(run)
        log.info("start %d: loss %.3e (%s)", i, run.main.best_loss, run.main.reason)
    finals = np.array([r.main.best_loss for r in runs])
    best_i = int(np.argmin(finals))
    best = runs[best_i]
    trace_file = None
    if out is not None:
        shutil.copyfile(out / "traces" / f"start_{best_i}.csv", out / "trace.csv")
        trace_file = "trace.csv"

    reduced = best.main.best_gamma
    bd = objective.breakdown(reduced)
    params = bd.parameters
    coeffs = problem.ansatz.coefficients(params)
    train = evaluate_model(problem, params, problem.train_sizes)
    test = evaluate_model(problem, params, problem.test_sizes)

    report = RecoveryReport(
        mode=mode, name=config.name, seed=config.seed, labels=list(problem.ansatz.labels),
        parameters=[float(x) for x in params], coefficients=[float(x) for x in coeffs],
        train=train, test=test, final_loss=float(bd.total), contributions=dict(bd.contributions),
        termination=best.main.reason, n_steps=len(best.main.steps) - 1 + (len(best.warmup.steps) - 1 if best.warmup else 0),
        n_evals=best.main.n_evals + (best.warmup.n_evals if best.warmup else 0), escapes=best.main.escapes,
        multistart={"n_starts": len(runs), "best_start": best_i, "final_losses": finals.tolist(),
                    "dispersion": float(np.std(finals))},
        importance=dict(problem.importance), trace_file=trace_file, trace=best)
    _support_summary(problem, spec, objective, report)
    _flag(problem, report)
    if out is not None:
        report.save(out / "report.json")
    return report


def _support_summary(problem, spec, objective, report):
    labels = list(problem.ansatz.labels)
    support = None
    if problem.planted_labels is not None:
        support = [lb for lb in problem.planted_labels if lb in labels]
        report.planted = dict(problem.planted_labels)
        report.representable = len(support) == len(problem.planted_labels)
        pr = planted_reduced(problem, spec)
        if pr is not None:
            report.loss_at_planted = float(objective(pr))
    elif problem.config.reference.support:
        support = [lb for lb in problem.config.reference.support if lb in labels]
    if support is None or problem.ansatz.map.kind != "linear":
        return
    c = np.asarray(report.coefficients)
    off = [i for i, lb in enumerate(labels) if lb not in support]
    report.support = support
    report.off_support_l1 = float(np.sum(np.abs(c[off])))
    total = float(np.sum(np.abs(c)))
    report.off_support_fraction = report.off_support_l1 / total if total > 0 else None


def _flag(problem, report):
    thr = problem.config.flag_overlap
    for group, rows in (("train", report.train), ("test", report.test)):
        for n, m in rows.items():
            if m["overlap"] < thr:
                report.flags.append(f"{group} N={n}: overlap {m['overlap']:.6f} below {thr}")
    if report.representable is False:
        missing = [lb for lb in report.planted if lb not in report.labels]
        report.flags.append(f"basis lacks planted operators {missing}")


def run_extrapolate(config: ExperimentConfig, out_dir=None, executor=None, timing: bool = True,
                    importance_factor: float = 1000.0) -> RecoveryReport:
    train, test = config.sizes.train, config.sizes.test
    if not test:
        raise ConfigError("extrapolate needs test sizes")
    if min(test) <= max(train):
        raise ConfigError(f"test sizes {sorted(test)} must all exceed the training sizes {sorted(train)}")
    importance = dict(config.loss.importance) or {max(train): importance_factor}
    return run_recover(config, out_dir, executor, timing, mode="extrapolate", importance=importance)


def replay_loss(config: ExperimentConfig, trace_row: dict, importance: dict | None = None) -> float:
    """Loss recomputed from a persisted (main-stage) trace row."""
    problem = build_problem(config)
    if importance is not None:
        problem.importance = dict(importance)
    return LossObjective(build_loss_spec(problem))(persist.trace_gamma(trace_row))


# ---------------------------------------------------------------------------
# scan


@dataclass
class ScanResult:
    columns: list
    rows: list
    grid_min: dict
    cgd: dict
    steepest: dict
    beats_grid: bool
    traces: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {"grid_points": len(self.rows), "grid_min": self.grid_min, "cgd": self.cgd,
                "steepest": self.steepest, "beats_grid": self.beats_grid, "columns": self.columns}


def _observable_columns(bd) -> dict:
    out = {}
    for n, obs in bd.observables.items():
        for k, v in obs.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) or v is None:
                out[f"raw_{k}@{n}"] = v
    return out


def _trace_summary(trace) -> dict:
    return {"endpoint": trace.best_gamma.tolist(), "loss": trace.best_loss, "n_steps": len(trace.steps) - 1,
            "n_evals": trace.n_evals, "reason": trace.reason}


def scan_landscape(f, box, shape, start=None, cgd_cfg: CgdConfig = CgdConfig(), steepest_iters: int = 24,
                   row_extras=None, columns=(), project=None, describe=None, executor=None) -> ScanResult:
    """Grid evaluation of a 2-parameter loss, then CGD and steepest descent from one start.

    ``row_extras(p)`` may add per-point columns (term contributions, raw
    observables); ``columns`` fixes the order of the known ones.
    """
    n1, n2 = shape
    (lo1, hi1), (lo2, hi2) = box
    rows = []
    for p1 in np.linspace(lo1, hi1, n1):
        for p2 in np.linspace(lo2, hi2, n2):
            p = np.array([p1, p2])
            row = {"p1": float(p1), "p2": float(p2), "total": float(f(p))}
            if row_extras is not None:
                row.update(row_extras(p))
            rows.append(row)
    extra = []
    for r in rows:
        for k in r:
            if k not in extra and k not in ("p1", "p2", "total") and k not in columns:
                extra.append(k)
    all_columns = ["p1", "p2", "total"] + list(columns) + extra
    best_row = min(rows, key=lambda r: r["total"])
    grid_min = {"p": [best_row["p1"], best_row["p2"]], "loss": best_row["total"]}

    start = np.asarray(start if start is not None else [(lo1 + hi1) / 2, (lo2 + hi2) / 2], dtype=float)
    traces = {
        "cgd": cgd_minimize(f, start, cgd_cfg, project=project, describe=describe, executor=executor),
        "steepest": steepest_descent_minimize(f, start, replace(cgd_cfg, max_iters=steepest_iters),
                                              project=project, describe=describe, executor=executor),
    }
    cgd = _trace_summary(traces["cgd"])
    sd = _trace_summary(traces["steepest"])
    return ScanResult(all_columns, rows, grid_min, cgd, sd, bool(cgd["loss"] <= grid_min["loss"]), traces)


def run_scan(config: ExperimentConfig, out_dir=None, executor=None, timing: bool = True) -> ScanResult:
    problem = build_problem(config)
    pmap = problem.ansatz.map
    if pmap.n_params != 2 or pmap.box is None:
        raise ConfigError("scan needs a 2-parameter parametrization with a box")
    spec = build_loss_spec(problem)
    if spec.n_reduced != 2:
        raise ConfigError("scan needs an ungauged 2-parameter domain (gauge: none)")
    sc = config.scan or ScanConfig()
    objective = LossObjective(spec)

    def extras(p):
        bd = objective.breakdown(p)
        row = dict(bd.contributions)
        row.update(_observable_columns(bd))
        return row

    result = scan_landscape(objective, pmap.box, sc.shape, sc.start, config.optimizer.cgd(config.seed),
                            sc.steepest_iters, extras, spec.columns(), objective.project,
                            objective.describe, executor)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.yaml")
        persist.write_grid(out / "grid.csv", result.columns, result.rows)
        for name, tr in result.traces.items():
            persist.write_trace(out / f"trace_{name}.csv", tr.steps, spec.columns(), 2, timing=timing)
        (out / "scan.json").write_text(persist.dump_document(result.summary(), "scan_summary"))
    return result


# ---------------------------------------------------------------------------
# bench


def run_bench(config: ExperimentConfig, out_dir=None, repeats: int = 3) -> dict:
    """Wall time of assembly, diagonalization and one loss evaluation per size."""
    problem = build_problem(config)
    rng = np.random.default_rng(config.seed)
    p = rng.uniform(*config.optimizer.start_box, size=problem.ansatz.n_params)
    rows = {}
    for n in sorted(problem.bases):
        basis = problem.bases[n]
        t0 = time.perf_counter()
        H = problem.ansatz.hamiltonian_at(p, basis)
        t_asm = time.perf_counter() - t0
        t0 = time.perf_counter()
        for _ in range(repeats):
            rep = eigs_low(H, 1, basis)
        t_eig = (time.perf_counter() - t0) / repeats
        rows[n] = {"dim": basis.dim, "nnz": int(H.nnz), "assemble_seconds": t_asm,
                   "eig_seconds": t_eig, "method": rep.method}
    spec = build_loss_spec(problem)
    obj = LossObjective(spec)
    x = spec.gauge.reduce(p)
    t0 = time.perf_counter()
    for i in range(repeats):
        obj(x + 1e-9 * i)  # distinct points defeat the cache
    doc = {"sizes": rows, "loss_eval_seconds": (time.perf_counter() - t0) / repeats}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(persist.dump_document(doc, "bench"))
    return doc
