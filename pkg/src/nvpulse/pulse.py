"""Sinusoidal pulse ansatz B_x(alpha, t) = Omega(t) * sum_i a_i sin(w_i t + phi_i)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, TextIO

import numpy as np
from scipy.optimize import minimize_scalar

TWO_PI = 2.0 * math.pi

# Projection box used by the optimizer: amplitude (G) and angular frequency (rad/ns).
AMPLITUDE_BOUND = 2000.0
FREQUENCY_BOUNDS = (0.0, TWO_PI * 20.0)


@dataclass(frozen=True)
class PulseParams:
    """Control vector flattened as (a_1, w_1, phi_1, a_2, w_2, phi_2, ...)."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).ravel()
        if alpha.size == 0 or alpha.size % 3:
            raise ValueError(f"parameter vector length must be a positive multiple of 3, got {alpha.size}")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("pulse parameters must be finite")
        alpha.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def from_components(cls, amplitudes, frequencies, phases) -> "PulseParams":
        return cls(np.column_stack([amplitudes, frequencies, phases]).ravel())

    @property
    def n_basis(self) -> int:
        return self.alpha.size // 3

    @property
    def amplitudes(self) -> np.ndarray:
        return self.alpha[0::3]

    @property
    def frequencies(self) -> np.ndarray:
        return self.alpha[1::3]

    @property
    def phases(self) -> np.ndarray:
        return self.alpha[2::3]


@dataclass(frozen=True)
class Envelope:
    """Flat-topped cosine ramp of total duration ``duration`` and ramp time ``ramp``."""

    duration: float
    ramp: float
    magnitude: float = 1.0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("envelope duration must be positive")
        if not 0 < self.ramp <= self.duration / 2:
            raise ValueError("ramp time must satisfy 0 < ramp <= duration / 2")

    @classmethod
    def for_duration(cls, duration: float, ramp_fraction: float = 0.3) -> "Envelope":
        return cls(duration, ramp_fraction * duration)


def basis_sum(params: PulseParams, t: float) -> float:
    return float(np.dot(params.amplitudes, np.sin(params.frequencies * t + params.phases)))


def envelope(env: Envelope, t: float) -> float:
    if t <= 0.0 or t >= env.duration:
        return 0.0
    if t < env.ramp:
        return 0.5 * (1.0 - math.cos(math.pi * t / env.ramp)) * env.magnitude
    if t > env.duration - env.ramp:
        return 0.5 * (1.0 - math.cos(math.pi * (env.duration - t) / env.ramp)) * env.magnitude
    return env.magnitude


def envelope_array(env: Envelope, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    rise = 0.5 * (1.0 - np.cos(np.pi * t / env.ramp))
    fall = 0.5 * (1.0 - np.cos(np.pi * (env.duration - t) / env.ramp))
    out = np.where(t < env.ramp, rise, np.where(t > env.duration - env.ramp, fall, 1.0)) * env.magnitude
    return np.where((t <= 0.0) | (t >= env.duration), 0.0, out)


def drive(params: PulseParams, env: Envelope, t: float) -> float:
    scale = envelope(env, t)
    if scale == 0.0:
        return 0.0
    return scale * basis_sum(params, t)


def drive_array(params: PulseParams, env: Envelope, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    phase = np.multiply.outer(t, params.frequencies) + params.phases
    return envelope_array(env, t) * (np.sin(phase) @ params.amplitudes)


def drive_gradient(params: PulseParams, env: Envelope, t: float) -> np.ndarray:
    """Partial derivatives of B_x(t) in the flattened parameter order."""
    out = np.zeros(params.alpha.size)
    scale = envelope(env, t)
    if scale == 0.0:
        return out
    phase = params.frequencies * t + params.phases
    s, c = np.sin(phase), np.cos(phase)
    out[0::3] = scale * s
    out[1::3] = scale * params.amplitudes * t * c
    out[2::3] = scale * params.amplitudes * c
    return out


def max_amplitude(params: PulseParams, env: Envelope, resolution: int = 4096) -> float:
    """max |B_x| over the pulse: dense sampling, then golden-section polish of the best sample."""
    if resolution < 1000:
        raise ValueError("resolution must be at least 1000 samples")
    t = np.linspace(0.0, env.duration, resolution)
    values = np.abs(drive_array(params, env, t))
    k = int(np.argmax(values))
    best = float(values[k])
    # polish only a strict local peak; plateaus and endpoint maxima are exact already
    if best == 0.0 or k == 0 or k == resolution - 1 or not values[k - 1] < best > values[k + 1]:
        return best
    res = minimize_scalar(
        lambda x: -abs(drive(params, env, x)),
        bracket=(t[k - 1], t[k], t[k + 1]),
        method="golden",
        options={"xtol": 1e-12},
    )
    return max(best, -float(res.fun))


class AnsatzPulse:
    """Drive callable used by the propagator: value and parameter gradient at time t."""

    def __init__(self, params: PulseParams, env: Envelope):
        self.params = params
        self.env = env
        self.n_params = params.alpha.size
        # contiguous copies: these are read on every integrator stage
        self._a = np.ascontiguousarray(params.amplitudes)
        self._w = np.ascontiguousarray(params.frequencies)
        self._p = np.ascontiguousarray(params.phases)
        self._zeros = np.zeros(self.n_params)
        self._zeros.flags.writeable = False
        # the envelope's second derivative jumps at the ramp joints
        self.breakpoints = (env.ramp, env.duration - env.ramp)

    def value(self, t: float) -> float:
        scale = envelope(self.env, t)
        if scale == 0.0:
            return 0.0
        return scale * float(self._a @ np.sin(self._w * t + self._p))

    def gradient(self, t: float) -> np.ndarray:
        return self.value_and_gradient(t)[1]

    def value_and_gradient(self, t: float) -> tuple[float, np.ndarray]:
        scale = envelope(self.env, t)
        if scale == 0.0:
            return 0.0, self._zeros
        phase = self._w * t + self._p
        s = np.sin(phase)
        ac = (scale * self._a) * np.cos(phase)
        grad = np.empty(self.n_params)
        grad[0::3] = scale * s
        grad[1::3] = ac * t
        grad[2::3] = ac
        return scale * float(self._a @ s), grad

    def samples(self, t: np.ndarray) -> np.ndarray:
        return drive_array(self.params, self.env, t)


def sample_times(duration: float, sample_rate: float) -> np.ndarray:
    """Uniform grid including both endpoints at ``sample_rate`` samples per ns."""
    n = max(int(round(duration * sample_rate)), 1)
    return np.linspace(0.0, duration, n + 1)


def write_waveform(stream: TextIO, t: np.ndarray, b: np.ndarray, header: Iterable[str] = ()) -> None:
    """Two-column text export: time (ns) and B_x (G)."""
    for line in header:
        stream.write(f"# {line}\n")
    stream.write("t_ns\tB_x_G\n")
    for ti, bi in zip(t, b):
        stream.write(f"{ti:.12g}\t{bi:.12g}\n")


def read_waveform(stream: TextIO) -> tuple[np.ndarray, np.ndarray]:
    rows = [line.split() for line in stream if line.strip() and not line.startswith("#")]
    data = np.array(rows[1:], dtype=float)
    return data[:, 0], data[:, 1]
