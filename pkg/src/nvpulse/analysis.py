"""
Derived quantities for optimized pulses: the Gaussian pi-pulse reference,
power spectral densities and repeated-inversion (Carr-Purcell) traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
from scipy import signal
from scipy.linalg import polar
from scipy.special import erf

from .pulse import TWO_PI
from .spin_model import SpinSystem, transition_frequencies


def qubit_drive_element(system: SpinSystem) -> float:
    """|<0|H_x|-1>| in GHz/G (linear), using the polarized-nuclei product states."""
    hx = system.drive_operator / TWO_PI
    return float(abs(hx[system.polarized_index(0), system.polarized_index(-1)]))


@dataclass(frozen=True)
class GaussianPulse:
    """Truncated Gaussian envelope on a cosine carrier, usable as a propagator drive.

    B_x(t) = peak * exp(-(t - T/2)^2 / (2 sigma^2)) * cos(carrier * t) on [0, T].
    """

    duration: float
    peak: float
    sigma: float
    carrier: float  # rad/ns
    n_params = 0

    def envelope(self, t):
        t = np.asarray(t, dtype=float)
        shape = np.exp(-((t - self.duration / 2) ** 2) / (2 * self.sigma**2))
        return np.where((t < 0) | (t > self.duration), 0.0, self.peak * shape)

    def value(self, t: float) -> float:
        if t < 0 or t > self.duration:
            return 0.0
        return self.peak * math.exp(-((t - self.duration / 2) ** 2) / (2 * self.sigma**2)) * math.cos(self.carrier * t)

    def gradient(self, t: float) -> np.ndarray:
        return np.zeros(0)

    def samples(self, t: np.ndarray) -> np.ndarray:
        return self.envelope(t) * np.cos(self.carrier * np.asarray(t, dtype=float))


def gaussian_pi_reference(
    duration: float,
    system: SpinSystem,
    sigma_fraction: float = 1.0 / 6.0,
    samples: int = 2048,
) -> tuple[np.ndarray, np.ndarray, GaussianPulse]:
    """Gaussian pi pulse of the same duration as an optimized control.

    The envelope is centered at T/2 with sigma = ``sigma_fraction`` * T and cut
    at [0, T].  Its peak makes the rotating-frame Rabi area
    integral(2 pi |<0|H_x|-1>| B(t) dt) equal to pi.  Returns
    (times, waveform, pulse); the peak amplitude in Gauss is ``pulse.peak``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    sigma = sigma_fraction * duration
    half_width = duration / 2
    area_unit = sigma * math.sqrt(2 * math.pi) * erf(half_width / (math.sqrt(2) * sigma))
    rabi_per_gauss = TWO_PI * qubit_drive_element(system)
    peak = math.pi / (rabi_per_gauss * area_unit)
    carrier = TWO_PI * transition_frequencies(system)[0]
    pulse = GaussianPulse(duration, peak, sigma, carrier)
    t = np.linspace(0.0, duration, samples)
    return t, pulse.samples(t), pulse


@dataclass(frozen=True)
class SpectrumResult:
    frequencies: np.ndarray  # GHz, ascending
    density: np.ndarray  # G^2 / GHz, one-sided
    sample_rate: float  # samples per ns
    window: str
    zero_padding: int

    def total_power(self) -> float:
        """Integral of the one-sided density, equal to the mean square of the waveform."""
        return float(np.sum(self.density) * (self.frequencies[1] - self.frequencies[0]))


def psd(waveform: Sequence[float], sample_rate: float, zero_padding: int = 8, window: str = "boxcar", times=None) -> SpectrumResult:
    """One-sided, density-normalized periodogram of a real pulse waveform.

    ``sample_rate`` is in samples per ns, so frequencies come out in GHz.  A
    rectangular window is the default because the pulse already vanishes at
    its ends.  If ``times`` is given it must be uniformly spaced.
    """
    x = np.asarray(waveform, dtype=float)
    if x.size < 256:
        raise ValueError("need at least 256 samples for a spectrum")
    if times is not None:
        dt = np.diff(np.asarray(times, dtype=float))
        if np.ptp(dt) > 1e-9 * max(abs(dt.mean()), 1e-300):
            raise ValueError("waveform samples must be uniformly spaced")
    freqs, density = signal.periodogram(
        x,
        fs=sample_rate,
        window=window,
        nfft=zero_padding * x.size,
        detrend=False,
        return_onesided=True,
        scaling="density",
    )
    return SpectrumResult(freqs, density, float(sample_rate), window, int(zero_padding))


@dataclass(frozen=True)
class MultipulseTrace:
    counts: np.ndarray  # even pulse numbers, strictly increasing
    populations: np.ndarray
    norms: np.ndarray  # ||psi_k|| at the same counts, a running round-off check
    duration: float | None = None
    initial_label: str = "|+↓↓↓⟩"


def sensing_state(system: SpinSystem) -> np.ndarray:
    """(|0> + |-1>)/sqrt(2) for the electron with every nucleus down."""
    psi = np.zeros(system.dimension, dtype=complex)
    psi[system.polarized_index(0)] = 1 / math.sqrt(2)
    psi[system.polarized_index(-1)] = 1 / math.sqrt(2)
    return psi


def multipulse_trace(
    u_pulse: np.ndarray,
    initial_state: np.ndarray,
    n_max: int,
    target: np.ndarray | None = None,
    unitarity_tol: float = 1e-6,
    duration: float | None = None,
) -> MultipulseTrace:
    """Population of ``target`` (default: the initial state) after 0, 2, 4, ... n_max back-to-back pulses.

    The pulse unitary is checked against ``unitarity_tol`` and then replaced
    by its nearest unitary (polar factor), so integrator round-off does not
    pile up over thousands of applications.
    """
    u_pulse = np.asarray(u_pulse, dtype=complex)
    if not 0 <= n_max <= 1_000_000:
        raise ValueError("n_max must lie in [0, 1e6]")
    defect = np.abs(u_pulse.conj().T @ u_pulse - np.eye(u_pulse.shape[0])).max()
    if defect > unitarity_tol:
        raise ValueError(f"pulse propagator is not unitary (defect {defect:.2e} > {unitarity_tol:.1e})")
    u_pulse, _ = polar(u_pulse)
    psi = np.asarray(initial_state, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    target = psi if target is None else np.asarray(target, dtype=complex) / np.linalg.norm(target)
    pair = u_pulse @ u_pulse
    counts = np.arange(0, n_max + 1, 2)
    pops = np.empty(counts.size)
    norms = np.empty(counts.size)
    for i in range(counts.size):
        pops[i] = abs(np.vdot(target, psi)) ** 2
        norms[i] = np.linalg.norm(psi)
        psi = pair @ psi
    return MultipulseTrace(counts, pops, norms, duration)


def is_monotone_nonincreasing(values: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.all(np.diff(values) <= tol))


def write_table(stream: TextIO, columns: dict, header: Sequence[str] = ()) -> None:
    """Tab-separated table with '#' provenance lines and a labeled header row."""
    for line in header:
        stream.write(f"# {line}\n")
    names = list(columns)
    stream.write("\t".join(names) + "\n")
    data = [np.asarray(columns[n]) for n in names]
    for row in zip(*data):
        stream.write("\t".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
