"""
Projected L-BFGS with backtracking line search, and multi-start pulse optimization.

Bounds are enforced by projecting every trial point onto the parameter box.
The search direction comes from the two-loop recursion applied to the
projected gradient, and the stopping test uses the projected gradient's
infinity norm.
"""

from __future__ import annotations

import hashlib
import math
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .objective import ControlProblem, InfidelityObjective
from .propagator import FAST_TOL, VERIFY_TOL, IntegrationError
from .pulse import AMPLITUDE_BOUND, FREQUENCY_BOUNDS, TWO_PI, PulseParams, max_amplitude
from .spin_model import transition_frequencies

TERMINATIONS = ("converged_grad", "converged_obj", "max_iter", "linesearch_fail", "integration_error")


@dataclass(frozen=True)
class OptimizerOptions:
    max_iterations: int = 1000
    grad_inf_tol: float = 1e-9
    rel_obj_tol: float = 1e-8
    lbfgs_memory: int = 10
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    amplitude_bound: float = AMPLITUDE_BOUND
    frequency_bounds: tuple[float, float] = FREQUENCY_BOUNDS
    fast_tol: float = FAST_TOL
    verify_tol: float = VERIFY_TOL
    precondition: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 0 or self.lbfgs_memory < 1 or self.max_backtracks < 1:
            raise ValueError("iteration counts and memory must be positive")
        for name in ("grad_inf_tol", "rel_obj_tol", "fast_tol", "verify_tol", "amplitude_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.armijo < 1 or not 0 < self.shrink < 1:
            raise ValueError("line-search constants must lie in (0, 1)")
        lo, hi = self.frequency_bounds
        if not lo < hi:
            raise ValueError("frequency bounds must satisfy lower < upper")

    def bounds(self, n_basis: int) -> tuple[np.ndarray, np.ndarray]:
        lower = np.tile([-self.amplitude_bound, self.frequency_bounds[0], -np.inf], n_basis)
        upper = np.tile([self.amplitude_bound, self.frequency_bounds[1], np.inf], n_basis)
        return lower, upper


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    iterations: int
    termination: str
    history: list[tuple[float, float]]
    evaluations: int


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    pg = np.array(g, dtype=float)
    pg[(x <= lower) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


def _two_loop(q: np.ndarray, s_hist, y_hist) -> np.ndarray:
    q = q.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs(
    fg: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: Sequence[float],
    opts: OptimizerOptions = OptimizerOptions(),
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    scale: np.ndarray | None = None,
) -> LBFGSResult:
    """Minimize ``fg`` (returning value and gradient) inside the box [lower, upper].

    ``scale`` gives the typical magnitude of each variable; the iteration runs
    on x / scale, which acts as a diagonal preconditioner.  The gradient
    stopping test is always applied to the unscaled projected gradient.
    """
    x_raw = np.array(x0, dtype=float)
    sigma = np.ones_like(x_raw) if scale is None else np.asarray(scale, dtype=float)
    if sigma.shape != x_raw.shape or not np.all(sigma > 0):
        raise ValueError("scale must be positive and match x0")
    raw_lower = np.full_like(x_raw, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    raw_upper = np.full_like(x_raw, np.inf) if upper is None else np.asarray(upper, dtype=float)
    lower, upper = raw_lower / sigma, raw_upper / sigma
    x = np.clip(x_raw / sigma, lower, upper)

    def unscale(z):
        return np.clip(z * sigma, raw_lower, raw_upper)

    def fg_scaled(z):
        value, grad = fg(unscale(z))
        return value, np.asarray(grad, dtype=float) * sigma

    def pg_norm(pg_scaled):
        return float(np.max(np.abs(pg_scaled / sigma)))

    f, g = fg_scaled(x)
    evaluations = 1
    pg = projected_gradient(x, g, lower, upper)
    history = [(float(f), pg_norm(pg))]
    s_hist: deque = deque(maxlen=opts.lbfgs_memory)
    y_hist: deque = deque(maxlen=opts.lbfgs_memory)
    termination = "max_iter"
    iterations = 0

    while True:
        if pg_norm(pg) < opts.grad_inf_tol:
            termination = "converged_grad"
            break
        if iterations >= opts.max_iterations:
            termination = "max_iter"
            break
        free = pg != 0.0
        d = -_two_loop(pg, s_hist, y_hist)
        d[~free] = 0.0
        slope = d @ pg
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            d = -pg
            slope = d @ pg
        # without curvature history, cap the first trial at a unit change per coordinate
        step = 1.0 if s_hist else min(1.0, 1.0 / np.max(np.abs(d)))

        accepted = False
        for _ in range(opts.max_backtracks):
            x_new = np.clip(x + step * d, lower, upper)
            f_new, g_new = fg_scaled(x_new)
            evaluations += 1
            if np.isfinite(f_new) and f_new <= f + opts.armijo * (g @ (x_new - x)):
                accepted = True
                break
            step *= opts.shrink
        if not accepted:
            termination = "linesearch_fail"
            break

        s = x_new - x
        y = g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
        f_old = f
        x, f, g = x_new, f_new, g_new
        pg = projected_gradient(x, g, lower, upper)
        iterations += 1
        history.append((float(f), pg_norm(pg)))
        if abs(f_old - f) <= opts.rel_obj_tol * abs(f_old):
            termination = "converged_obj"
            break

    return LBFGSResult(unscale(x), float(f), iterations, termination, history, evaluations)


def parameter_scale(problem: ControlProblem) -> np.ndarray:
    """Typical magnitude of each pulse parameter, used to precondition L-BFGS.

    An amplitude change of one unit rotates the qubit by about one radian over
    the pulse; a frequency change of 1/T shifts the accumulated phase by about
    one radian; phases are already in radians.
    """
    system = problem.system
    coupling = abs(system.drive_operator[system.polarized_index(0), system.polarized_index(-1)])
    T = problem.duration
    return np.tile([1.0 / (coupling * T), 1.0 / T, 1.0], problem.n_basis)


def derive_seed(global_seed: int, duration: float, n_basis: int, restart: int) -> int:
    """Reproducible 63-bit seed for one restart of one (T, N) cell."""
    key = f"{int(global_seed)}|{float(duration)!r}|{int(n_basis)}|{int(restart)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def random_init(
    n_basis: int,
    opts: OptimizerOptions,
    seed: int,
    carrier: float = TWO_PI * 0.49,
) -> np.ndarray:
    """Random starting point: amplitudes within 10% of the bound, log-uniform
    frequencies over [2pi*0.05, 2pi*20] rad/ns with the first component on
    ``carrier``, uniform phases."""
    rng = np.random.default_rng(seed)
    lo, hi = opts.frequency_bounds
    f_lo, f_hi = max(TWO_PI * 0.05, lo if lo > 0 else TWO_PI * 0.05), min(TWO_PI * 20.0, hi)
    amplitudes = rng.uniform(-0.1, 0.1, n_basis) * opts.amplitude_bound
    frequencies = np.exp(rng.uniform(math.log(f_lo), math.log(f_hi), n_basis))
    frequencies[0] = min(max(carrier, lo), hi)
    phases = rng.uniform(0.0, TWO_PI, n_basis)
    return np.column_stack([amplitudes, frequencies, phases]).ravel()


@dataclass
class OptimizationRecord:
    """Outcome of one optimization run.

    ``infidelity`` is re-evaluated at ``verify_tol``; ``optimized_infidelity``
    is the value the optimizer saw at ``fast_tol``.  ``wall_time`` is not part
    of the persisted form so that stores are reproducible byte for byte.
    """

    duration: float
    n_basis: int
    seed: int
    alpha: list[float]
    infidelity: float
    optimized_infidelity: float
    max_amplitude: float
    iterations: int
    evaluations: int
    termination: str
    history: list[tuple[float, float]] = field(default_factory=list)
    fast_tol: float = FAST_TOL
    verify_tol: float = VERIFY_TOL
    ramp_fraction: float = 0.3
    restart: int = 0
    wall_time: float = field(default=0.0, compare=False)

    @property
    def params(self) -> PulseParams:
        return PulseParams(self.alpha)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("wall_time")
        doc["history"] = [list(h) for h in self.history]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizationRecord":
        doc = dict(doc)
        doc["history"] = [tuple(h) for h in doc.get("history", [])]
        doc["alpha"] = [float(a) for a in doc["alpha"]]
        return cls(**doc)


def lbfgs_minimize(
    problem: ControlProblem,
    opts: OptimizerOptions = OptimizerOptions(),
    seed: int | None = None,
    x0: Sequence[float] | None = None,
    restart: int = 0,
) -> OptimizationRecord:
    """Optimize one pulse from a seeded random start and verify at high accuracy."""
    start = time.perf_counter()
    seed = opts.seed if seed is None else seed
    if x0 is None:
        carrier = TWO_PI * transition_frequencies(problem.system)[0]
        x0 = random_init(problem.n_basis, opts, seed, carrier=carrier)
    lower, upper = opts.bounds(problem.n_basis)
    objective = InfidelityObjective(problem, tol=opts.fast_tol)
    try:
        scale = parameter_scale(problem) if opts.precondition else None
        result = lbfgs(objective.value_and_gradient, x0, opts, lower, upper, scale)
        x, f, iterations, termination = result.x, result.f, result.iterations, result.termination
        history, evaluations = result.history, result.evaluations
    except IntegrationError:
        x = np.clip(np.asarray(x0, dtype=float), lower, upper)
        f, iterations, termination, history, evaluations = 1.0, 0, "integration_error", [], 0
    try:
        verified = InfidelityObjective(problem, tol=opts.verify_tol).value(x)
    except IntegrationError:
        verified, termination = 1.0, "integration_error"
    params = PulseParams(x)
    return OptimizationRecord(
        duration=float(problem.duration),
        n_basis=problem.n_basis,
        seed=int(seed),
        alpha=[float(v) for v in x],
        infidelity=float(verified),
        optimized_infidelity=float(f),
        max_amplitude=float(max_amplitude(params, problem.envelope)),
        iterations=iterations,
        evaluations=evaluations,
        termination=termination,
        history=history,
        fast_tol=opts.fast_tol,
        verify_tol=opts.verify_tol,
        ramp_fraction=problem.ramp_fraction,
        restart=restart,
        wall_time=time.perf_counter() - start,
    )


def best_record(records: Sequence[OptimizationRecord]) -> OptimizationRecord:
    """Lowest infidelity; ties go to the smaller maximum amplitude."""
    if not records:
        raise ValueError("no records")
    return min(records, key=lambda r: (r.infidelity, r.max_amplitude))


def _run_restart(args) -> OptimizationRecord:
    problem, opts, seed, restart = args
    return lbfgs_minimize(problem, opts, seed=seed, restart=restart)


def multistart(
    problem: ControlProblem,
    opts: OptimizerOptions = OptimizerOptions(),
    restarts: int = 8,
    jobs: int = 1,
) -> tuple[OptimizationRecord, list[OptimizationRecord]]:
    """Independent seeded restarts; returns (best, all records in restart order)."""
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    tasks = [
        (problem, opts, derive_seed(opts.seed, problem.duration, problem.n_basis, r), r) for r in range(restarts)
    ]
    if jobs > 1 and restarts > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, restarts)) as pool:
            records = list(pool.map(_run_restart, tasks))
    else:
        records = [_run_restart(t) for t in tasks]
    return best_record(records), records
