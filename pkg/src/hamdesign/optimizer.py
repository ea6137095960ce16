"""Nonlinear conjugate gradient descent with numerical gradients and golden-section line search."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2
MAX_ESCAPES = 3
BETA_SCHEMES = ("hestenes_stiefel", "polak_ribiere", "steepest_descent")


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CgdConfig:
    beta_scheme: str = "hestenes_stiefel"
    restart_period: int | None = None  # None -> domain dimension
    fd_step: float = 1e-5  # relative: h_m = fd_step * max(1, |gamma_m|)
    bracket_growth: float = 2.0
    initial_step: float = 1e-3
    line_rtol: float = 1e-6
    line_max_evals: int = 100
    max_iters: int = 200
    grad_tol: float = 1e-8
    loss_rtol: float = 1e-10
    n_starts: int = 1
    temperature: float = 0.1  # escape radius relative to |gamma|
    escape_patience: int = 10
    max_escapes: int = 0
    max_evals: int | None = None  # loss-evaluation budget
    max_seconds: float | None = None  # wall-clock budget
    seed: int = 0

    def __post_init__(self):
        if self.beta_scheme not in BETA_SCHEMES:
            raise ValueError(f"beta_scheme must be one of {BETA_SCHEMES}")
        for name in ("fd_step", "line_rtol", "grad_tol", "loss_rtol", "initial_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.restart_period is not None and self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.bracket_growth <= 1:
            raise ValueError("bracket_growth must exceed 1")
        if not 0 <= self.max_escapes <= MAX_ESCAPES:
            raise ValueError(f"max_escapes must lie in [0, {MAX_ESCAPES}]")
        if self.n_starts < 1 or self.max_iters < 0 or self.line_max_evals < 3:
            raise ValueError("invalid iteration budget")


@dataclass
class StepRecord:
    step: int
    gamma: np.ndarray
    loss: float
    terms: dict
    grad_norm: float
    step_length: float
    beta: float
    reset: bool
    seconds: float
    evals: int
    event: str = "step"


@dataclass
class OptimizationTrace:
    steps: list = field(default_factory=list)
    best_gamma: np.ndarray | None = None
    best_loss: float = math.inf
    reason: str = ""
    n_evals: int = 0
    escapes: int = 0

    @property
    def final(self) -> StepRecord:
        return self.steps[-1]

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])


@dataclass
class LineSearchResult:
    t: float
    value: float
    n_evals: int
    descent: bool = True
    exhausted: bool = False


class _Counted:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, x):
        self.n += 1
        return float(self.f(x))


# ---------------------------------------------------------------------------
# gradient


def fd_gradient(f, gamma, fd_step: float = 1e-5, executor=None) -> np.ndarray:
    """Central-difference gradient with per-coordinate step ``fd_step * max(1, |gamma_m|)``.

    A non-finite value at a displaced point shrinks that coordinate's step 10x
    once before giving up.
    """
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.size
    h = fd_step * np.maximum(1.0, np.abs(gamma))

    def partial_derivative(m, hm):
        e = np.zeros(n)
        e[m] = hm
        return (float(f(gamma + e)) - float(f(gamma - e))) / (2 * hm)

    def safe(m):
        g = partial_derivative(m, h[m])
        if not math.isfinite(g):
            g = partial_derivative(m, h[m] / 10)
            if not math.isfinite(g):
                raise OptimizationError(f"non-finite loss near gamma along coordinate {m}")
        return g

    if executor is None:
        return np.array([safe(m) for m in range(n)])
    return np.array(list(executor.map(safe, range(n))))


# ---------------------------------------------------------------------------
# line search


def golden_section(f, direction, gamma0, f0: float | None = None, initial_step: float = 1e-3,
                   growth: float = 2.0, rtol: float = 1e-6, max_evals: int = 100) -> LineSearchResult:
    """Minimize t -> f(gamma0 + t d) over t >= 0.

    The first trial step moves ``initial_step * (1 + |gamma0|)``; it is doubled
    while the loss keeps dropping, or halved until it drops below f0. The
    resulting bracket is contracted by golden sections until its width is
    below ``rtol`` times the best step. Returns the best sampled step.
    """
    gamma0 = np.asarray(gamma0, dtype=float)
    d = np.asarray(direction, dtype=float)
    evals = 0

    def phi(t):
        nonlocal evals
        evals += 1
        v = float(f(gamma0 + t * d))
        return v if math.isfinite(v) else math.inf

    if f0 is None:
        f0 = phi(0.0)
    dn = np.linalg.norm(d)
    if dn == 0:
        return LineSearchResult(0.0, f0, evals, descent=False)
    best_t, best_f = 0.0, f0

    def note(t, v):
        nonlocal best_t, best_f
        if v < best_f:
            best_t, best_f = t, v

    t = initial_step * (1 + np.linalg.norm(gamma0)) / dn
    ft = phi(t)
    note(t, ft)
    if ft < f0:
        lo, mid, fmid = 0.0, t, ft
        while True:
            if evals >= max_evals:
                return LineSearchResult(best_t, best_f, evals, exhausted=True)
            t_next = mid * growth
            f_next = phi(t_next)
            note(t_next, f_next)
            if f_next >= fmid:
                hi = t_next
                break
            lo, mid, fmid = mid, t_next, f_next
    else:
        hi = t
        while True:
            if evals >= max_evals:
                return LineSearchResult(0.0, f0, evals, descent=False, exhausted=True)
            t = t / growth
            if t * dn < 1e-15 * (1 + np.linalg.norm(gamma0)):
                return LineSearchResult(0.0, f0, evals, descent=False)
            ft = phi(t)
            note(t, ft)
            if ft < f0:
                lo = 0.0
                break
            hi = t

    # golden-section contraction of [lo, hi]
    a, b = lo, hi
    c = b - INV_PHI * (b - a)
    e = a + INV_PHI * (b - a)
    fc, fe = phi(c), phi(e)
    note(c, fc)
    note(e, fe)
    while (b - a) > rtol * max(best_t, 1e-300):
        if evals >= max_evals:
            return LineSearchResult(best_t, best_f, evals, exhausted=True)
        if fc < fe:
            b, e, fe = e, c, fc
            c = b - INV_PHI * (b - a)
            fc = phi(c)
            note(c, fc)
        else:
            a, c, fc = c, e, fe
            e = a + INV_PHI * (b - a)
            fe = phi(e)
            note(e, fe)
    if best_t == 0.0:
        return LineSearchResult(0.0, f0, evals, descent=False)
    return LineSearchResult(best_t, best_f, evals)


# ---------------------------------------------------------------------------
# escape


def perturb_escape(gamma, scale: float, rng) -> np.ndarray:
    """gamma + scale * u with u uniform on the unit ball."""
    gamma = np.asarray(gamma, dtype=float)
    if scale == 0:
        return gamma.copy()
    u = rng.standard_normal(gamma.size)
    u /= np.linalg.norm(u)
    r = rng.uniform() ** (1.0 / gamma.size)
    return gamma + scale * r * u


# ---------------------------------------------------------------------------
# conjugate gradient


def _beta(scheme, g_new, g_old, d_old) -> float:
    y = g_new - g_old
    if scheme == "hestenes_stiefel":
        den = float(d_old @ y)
    elif scheme == "polak_ribiere":
        den = float(g_old @ g_old)
    else:
        return 0.0
    if den == 0:
        return 0.0
    return max(float(g_new @ y) / den, 0.0)


def cgd_minimize(f, gamma0, config: CgdConfig = CgdConfig(), project=None, describe=None,
                 executor=None, on_step=None) -> OptimizationTrace:
    """Nonlinear conjugate gradient descent.

    ``project`` is applied to every accepted iterate (gauge constraints);
    ``describe(gamma)`` supplies per-term columns for the trace; ``on_step``
    receives each StepRecord as it is produced.
    """
    counted = _Counted(f)
    project = project or (lambda x: np.asarray(x, dtype=float))
    describe = describe or (lambda x: {})
    rng = np.random.default_rng(config.seed)
    t_start = time.perf_counter()

    x = project(np.array(gamma0, dtype=float))
    fx = counted(x)
    if not math.isfinite(fx):
        raise OptimizationError(f"loss is not finite at the starting point: {fx}")
    dim = x.size
    period = config.restart_period or dim
    trace = OptimizationTrace(best_gamma=x.copy(), best_loss=fx)

    def record(step, g, t, beta, reset, event):
        rec = StepRecord(step, x.copy(), fx, describe(x), float(np.max(np.abs(g))) if g.size else 0.0,
                         float(t), float(beta), bool(reset), time.perf_counter() - t_start, counted.n, event)
        trace.steps.append(rec)
        if on_step is not None:
            on_step(rec)
        if fx < trace.best_loss:
            trace.best_loss, trace.best_gamma = fx, x.copy()

    def gradient(point):
        return fd_gradient(counted, point, config.fd_step, executor)

    g = gradient(x)
    d = -g
    since_reset = 0
    record(0, g, 0.0, 0.0, True, "start")
    best_at_escape_check = fx
    stall_steps = 0
    history = [fx]
    step = 0

    def can_escape():
        return trace.escapes < config.max_escapes and np.max(np.abs(g)) >= config.grad_tol

    def escape():
        nonlocal x, fx, g, d, since_reset, stall_steps, best_at_escape_check, history
        scale = config.temperature * max(np.linalg.norm(x), 1.0)
        x = project(perturb_escape(x, scale, rng))
        fx = counted(x)
        if not math.isfinite(fx):
            x, fx = trace.best_gamma.copy(), trace.best_loss
        trace.escapes += 1
        stall_steps = 0
        best_at_escape_check = min(fx, trace.best_loss)
        g = gradient(x)
        d, since_reset = -g, 0
        history = [fx]
        record(step, g, 0.0, 0.0, True, "escape")
    reason = "max iterations"
    while True:
        if not np.all(np.isfinite(g)):
            reason = "non-finite gradient"
            break
        if np.max(np.abs(g)) < config.grad_tol:
            reason = "gradient tolerance"
            break
        if step >= config.max_iters:
            break
        if (config.max_evals is not None and counted.n >= config.max_evals) or \
                (config.max_seconds is not None and time.perf_counter() - t_start >= config.max_seconds):
            reason = "budget exhausted"
            break
        reset = since_reset == 0
        if float(g @ d) >= 0:
            d, reset, since_reset = -g, True, 0
        ls = golden_section(counted, d, x, fx, config.initial_step, config.bracket_growth,
                            config.line_rtol, config.line_max_evals)
        if not ls.descent:
            if reset:
                # a stuck line search counts as a stall
                if config.max_escapes and can_escape():
                    escape()
                    continue
                reason = "line search failure"
                break
            d, since_reset = -g, 0
            continue
        x_new = project(x + ls.t * d)
        f_new = ls.value if np.array_equal(x_new, x + ls.t * d) else counted(x_new)
        if f_new > fx + 1e-12:
            # projection undid the decrease; restart from steepest descent
            if reset:
                reason = "line search failure"
                break
            d, since_reset = -g, 0
            continue
        step += 1
        step_len = float(np.linalg.norm(x_new - x))
        x, fx = x_new, f_new
        g_new = gradient(x)
        since_reset += 1
        if since_reset >= period or config.beta_scheme == "steepest_descent":
            beta, since_reset = 0.0, 0
        else:
            beta = _beta(config.beta_scheme, g_new, g, d)
            if beta == 0.0:
                since_reset = 0
        d = -g_new + beta * d
        g = g_new
        record(step, g, step_len, beta, since_reset == 0, "step")
        history.append(fx)

        if len(history) > period:
            ref = history[-1 - period]
            if abs(ref - fx) <= config.loss_rtol * max(abs(ref), abs(fx)):
                if config.max_escapes and can_escape():
                    escape()
                    continue
                reason = "loss change tolerance"
                break

        if config.max_escapes:
            if fx < best_at_escape_check - config.loss_rtol * abs(best_at_escape_check):
                best_at_escape_check, stall_steps = fx, 0
            else:
                stall_steps += 1
            if stall_steps >= config.escape_patience and can_escape():
                escape()
    trace.reason = reason
    trace.n_evals = counted.n
    log.debug("cgd finished after %d steps (%s), loss %.3e", step, reason, trace.best_loss)
    return trace


def steepest_descent_minimize(f, gamma0, config: CgdConfig = CgdConfig(), **kwargs) -> OptimizationTrace:
    return cgd_minimize(f, gamma0, replace(config, beta_scheme="steepest_descent"), **kwargs)


@dataclass
class MultistartResult:
    best: OptimizationTrace
    traces: list
    final_losses: np.ndarray
    starts: np.ndarray

    @property
    def dispersion(self) -> float:
        ok = self.final_losses[np.isfinite(self.final_losses)]
        return float(np.std(ok)) if ok.size else math.nan


def draw_starts(n_starts: int, box, rng) -> np.ndarray:
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    return lo + (hi - lo) * rng.uniform(size=(n_starts, len(box)))


def multistart(f, n_starts: int, config: CgdConfig = CgdConfig(), box=None, dim: int | None = None,
               starts=None, executor=None, **kwargs) -> MultistartResult:
    """Independent CGD runs from several starts; keeps the lowest final loss.

    Starts are drawn uniformly from ``box`` (default [0, 1]^dim) unless given.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    if starts is None:
        if box is None:
            if dim is None:
                raise ValueError("need box, dim or explicit starts")
            box = [(0.0, 1.0)] * dim
        starts = draw_starts(n_starts, box, np.random.default_rng(config.seed))
    starts = np.atleast_2d(np.asarray(starts, dtype=float))[:n_starts]

    def run(i):
        try:
            return cgd_minimize(f, starts[i], replace(config, seed=config.seed + i), **kwargs)
        except (OptimizationError, ValueError, ArithmeticError) as exc:
            log.warning("start %d failed: %s", i, exc)
            return exc

    if executor is None:
        results = [run(i) for i in range(len(starts))]
    else:
        results = list(executor.map(run, range(len(starts))))
    traces = [r for r in results if isinstance(r, OptimizationTrace)]
    if not traces:
        raise OptimizationError(f"all {len(starts)} starts failed; first error: {results[0]}")
    finals = np.array([r.best_loss if isinstance(r, OptimizationTrace) else math.nan for r in results])
    best = min(traces, key=lambda tr: tr.best_loss)
    return MultistartResult(best, results, finals, starts)
