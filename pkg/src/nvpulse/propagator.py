"""
Lab-frame propagation of the Schrödinger equation and its GOAT sensitivities.

The unitary obeys dU/dt = -i H(t) U with H(t) = H0 + B_x(t) Hx.  For every
control parameter alpha_k the sensitivity dU/dalpha_k obeys

    d/dt (dU/dalpha_k) = -i [ (dB_x/dalpha_k) Hx U + H(t) dU/dalpha_k ],

starting from zero.  Both are stacked into one array and advanced by scipy's 8th-order
Dormand-Prince integrator (DOP853), so every block shares the same step
sequence.

Propagation may start from any block of columns instead of the identity.
The objective only needs the two qubit columns of U and of each
sensitivity, which keeps gradient evaluations close to the cost of a plain
propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, TextIO

import numpy as np
from scipy.integrate import DOP853

from .pulse import AnsatzPulse, Envelope, PulseParams
from .spin_model import SpinSystem

FAST_TOL = 1e-8
DEFAULT_TOL = 1e-10
VERIFY_TOL = 1e-12

# scipy's DOP853 controls a scaled RMS norm of the local error.  Requesting
# tol / _TOL_DIVISOR keeps the accumulated unitarity defect of full
# propagators below 10x the nominal tolerance for pulses up to ~10 ns.
_TOL_DIVISOR = 100.0
_MIN_RTOL = 100 * np.finfo(float).eps  # scipy clips anything smaller


class IntegrationError(RuntimeError):
    """The adaptive integrator could not complete the requested interval."""


class Drive(Protocol):
    n_params: int

    def value(self, t: float) -> float: ...

    def gradient(self, t: float) -> np.ndarray: ...


class ZeroDrive:
    n_params = 0

    def value(self, t: float) -> float:
        return 0.0

    def gradient(self, t: float) -> np.ndarray:
        return np.zeros(0)


def _value_and_gradient(drive: Drive):
    fn = getattr(drive, "value_and_gradient", None)
    if fn is not None:
        return fn
    return lambda t: (drive.value(t), drive.gradient(t))


@dataclass
class IntegratorStats:
    steps: int = 0  # accepted steps
    evaluations: int = 0


def integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t_end: float,
    atol: float,
    rtol: float,
    t_eval: Sequence[float] | None = None,
    max_steps: int = 2_000_000,
    breakpoints: Sequence[float] = (),
) -> tuple[np.ndarray, IntegratorStats, list[np.ndarray]]:
    """Integrate y' = rhs(t, y) over [0, t_end] for complex arrays of any shape.

    Uses scipy's DOP853 stepper at the nominal tolerances divided by
    ``_TOL_DIVISOR``, restarted at every interior ``breakpoint`` (points where
    the right-hand side is not smooth, such as envelope joints).  Returns the
    final state, step statistics and the dense-output states at ``t_eval``
    (sorted, inside the interval).
    """
    stats = IntegratorStats()
    y = np.array(y0, dtype=complex)
    shape = y.shape
    samples: list[np.ndarray] = []
    eval_times = np.asarray(t_eval if t_eval is not None else [], dtype=float)
    next_eval = 0
    while next_eval < eval_times.size and eval_times[next_eval] <= 0.0:
        samples.append(y.copy())
        next_eval += 1
    if t_end <= 0.0:
        return y, stats, samples

    def flat_rhs(t, yf):
        out = rhs(t, yf.reshape(shape)).ravel()
        # a NaN would stall scipy's step-size loop, so stop here instead
        if not math.isfinite(abs(out.sum())):
            raise IntegrationError(f"non-finite derivative at t={t:.6g}")
        return out

    edges = [0.0] + sorted(b for b in set(breakpoints) if 0.0 < b < t_end) + [t_end]
    yf = y.ravel()
    for t_start, t_stop in zip(edges[:-1], edges[1:]):
        solver = DOP853(
            flat_rhs,
            t_start,
            yf,
            t_stop,
            rtol=max(rtol / _TOL_DIVISOR, _MIN_RTOL),
            atol=atol / _TOL_DIVISOR,
            max_step=t_end / 10.0,
        )
        while solver.status == "running":
            if stats.steps >= max_steps:
                raise IntegrationError(f"exceeded {max_steps} steps at t={solver.t:.6g}")
            message = solver.step()
            if solver.status == "failed":
                raise IntegrationError(f"integration failed at t={solver.t:.6g}: {message}; drive may be too strong")
            stats.steps += 1
            if next_eval < eval_times.size and eval_times[next_eval] <= solver.t:
                dense = solver.dense_output()
                while next_eval < eval_times.size and eval_times[next_eval] <= solver.t:
                    samples.append(dense(eval_times[next_eval]).reshape(shape))
                    next_eval += 1
        stats.evaluations += solver.nfev
        yf = solver.y
    y = yf.reshape(shape).copy()
    while next_eval < eval_times.size:
        samples.append(y.copy())
        next_eval += 1
    return y, stats, samples


def schrodinger_rhs(h0: np.ndarray, hx: np.ndarray, drive: Drive):
    h0_i = -1j * h0
    hx_i = -1j * hx

    def rhs(t, y):
        b = drive.value(t)
        if b == 0.0:
            return h0_i @ y
        return (h0_i + b * hx_i) @ y

    return rhs


def goat_rhs(h0: np.ndarray, hx: np.ndarray, drive: Drive, m: int):
    """Right-hand side for the stacked state [U | dU/da_1 | ... | dU/da_P], each block m columns wide."""
    n_params = drive.n_params
    d = h0.shape[0]
    evaluate = _value_and_gradient(drive)
    h0_i = -1j * h0
    hx_i = -1j * hx
    source = np.empty((d, n_params, m), dtype=complex)

    def rhs(t, y):
        b, c = evaluate(t)
        if b == 0.0 and not c.any():
            return h0_i @ y
        out = (h0_i + b * hx_i) @ y
        hxu = hx_i @ y[:, :m]
        np.multiply(hxu[:, None, :], c[None, :, None], out=source)
        out[:, m:] += source.reshape(d, n_params * m)
        return out

    return rhs


def integrate_unitary(
    h0: np.ndarray,
    hx: np.ndarray,
    drive: Drive,
    duration: float,
    y0: np.ndarray,
    atol: float = DEFAULT_TOL,
    rtol: float = DEFAULT_TOL,
    want_gradient: bool = False,
    t_eval: Sequence[float] | None = None,
):
    """Low-level propagation of the columns ``y0``; returns (U y0, sensitivities, stats, samples)."""
    y0 = np.asarray(y0, dtype=complex)
    d, m = y0.shape
    if want_gradient:
        n_params = drive.n_params
        stacked = np.zeros((d, m * (1 + n_params)), dtype=complex)
        stacked[:, :m] = y0
        rhs = goat_rhs(h0, hx, drive, m)
    else:
        stacked = y0
        rhs = schrodinger_rhs(h0, hx, drive)
    breakpoints = getattr(drive, "breakpoints", ())
    y, stats, samples = integrate(rhs, stacked, duration, atol, rtol, t_eval=t_eval, breakpoints=breakpoints)
    if not want_gradient:
        return y, None, stats, samples
    sens = y[:, m:].reshape(d, drive.n_params, m).transpose(1, 0, 2)
    return y[:, :m], np.ascontiguousarray(sens), stats, samples


@dataclass
class PropagationRequest:
    """What to propagate: system, pulse, duration and accuracy.

    ``waveform`` replaces the ansatz pulse with any object providing
    ``value(t)``, ``gradient(t)`` and ``n_params`` (for example a Gaussian
    reference pulse).  With neither pulse nor waveform the drive is off.
    ``initial_state`` may be a state vector or a block of columns; by default
    the full identity is propagated.
    """

    system: SpinSystem
    params: PulseParams | None = None
    env: Envelope | None = None
    T: float | None = None
    atol: float = DEFAULT_TOL
    rtol: float = DEFAULT_TOL
    want_gradient: bool = False
    trajectory_times: np.ndarray | None = None
    initial_state: np.ndarray | None = None
    waveform: Drive | None = None

    def __post_init__(self):
        if self.T is None:
            if self.env is None:
                raise ValueError("either T or an envelope must be given")
            self.T = self.env.duration
        if not (math.isfinite(self.T) and self.T >= 0):
            raise ValueError(f"duration must be finite and non-negative, got {self.T}")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("tolerances must be positive")
        if self.params is not None and self.env is None:
            raise ValueError("pulse parameters require an envelope")
        if self.trajectory_times is not None:
            times = np.asarray(self.trajectory_times, dtype=float)
            if times.ndim != 1 or np.any(np.diff(times) < 0) or times.min() < 0 or times.max() > self.T:
                raise ValueError("trajectory_times must be sorted ascending within [0, T]")
            self.trajectory_times = times

    def drive(self) -> Drive:
        if self.waveform is not None:
            return self.waveform
        if self.params is not None:
            return AnsatzPulse(self.params, self.env)
        return ZeroDrive()

    def initial_columns(self) -> np.ndarray:
        d = self.system.dimension
        if self.initial_state is None:
            return np.eye(d, dtype=complex)
        psi = np.asarray(self.initial_state, dtype=complex)
        if psi.ndim == 1:
            psi = psi[:, None]
        if psi.shape[0] != d:
            raise ValueError(f"initial state has dimension {psi.shape[0]}, system has {d}")
        return psi


@dataclass
class PropagationResult:
    U_final: np.ndarray
    sensitivities: np.ndarray | None = None
    trajectory: tuple[np.ndarray, np.ndarray] | None = None
    integrator_stats: IntegratorStats = field(default_factory=IntegratorStats)


def _run(req: PropagationRequest, want_gradient: bool) -> PropagationResult:
    system = req.system
    y0 = req.initial_columns()
    u, sens, stats, samples = integrate_unitary(
        system.drift,
        system.drive_operator,
        req.drive(),
        req.T,
        y0,
        atol=req.atol,
        rtol=req.rtol,
        want_gradient=want_gradient,
        t_eval=req.trajectory_times,
    )
    trajectory = None
    if req.trajectory_times is not None:
        states = np.stack(samples) if samples else np.zeros((0,) + y0.shape, dtype=complex)
        trajectory = (req.trajectory_times, np.abs(states) ** 2)
    return PropagationResult(u, sens, trajectory, stats)


def propagate(req: PropagationRequest) -> PropagationResult:
    """Final-time propagator (or propagated columns) without sensitivities."""
    if req.want_gradient:
        raise ValueError("use propagate_goat for sensitivities")
    return _run(req, False)


def propagate_goat(req: PropagationRequest) -> PropagationResult:
    """Propagator plus dU/dalpha_k for every pulse parameter, integrated jointly."""
    return _run(req, True)


def sample_trajectory(req: PropagationRequest) -> tuple[np.ndarray, np.ndarray]:
    """Basis-state populations of ``req.initial_state`` at ``req.trajectory_times``.

    Returns (times, populations) with populations shaped (len(times), dimension).
    """
    if req.initial_state is None or np.asarray(req.initial_state).ndim != 1:
        raise ValueError("sample_trajectory needs a single initial state vector")
    psi = np.asarray(req.initial_state, dtype=complex)
    if abs(np.linalg.norm(psi) - 1.0) > 1e-10:
        raise ValueError("initial state must be normalized")
    if req.trajectory_times is None:
        raise ValueError("sample_trajectory needs trajectory_times")
    result = _run(req, False)
    times, pops = result.trajectory
    return times, pops[:, :, 0]


def write_trajectory(
    stream: TextIO,
    times: np.ndarray,
    populations: np.ndarray,
    labels: Sequence[str],
    threshold: float = 1e-9,
    header: Sequence[str] = (),
) -> list[int]:
    """Tabular export, dropping basis states whose population never exceeds ``threshold``.

    Returns the indices of the exported basis states.
    """
    keep = [j for j in range(populations.shape[1]) if populations[:, j].max() > threshold]
    for line in header:
        stream.write(f"# {line}\n")
    stream.write("\t".join(["t_ns"] + [labels[j] for j in keep]) + "\n")
    for t, row in zip(times, populations):
        stream.write("\t".join([f"{t:.12g}"] + [f"{row[j]:.12e}" for j in keep]) + "\n")
    return keep
