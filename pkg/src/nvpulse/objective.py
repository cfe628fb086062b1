"""
Population-inversion infidelity on the qubit subspace and its gradient.

The qubit is spanned by |m_s=0> and |m_s=-1> with every nucleus in its
lowest state.  The final lab-frame propagator is first moved to the frame
co-rotating with the drift, U_rot = exp(+i H0 T) U, then compressed onto the
qubit, u = P^dag U_rot P, and compared with the X gate:

    g = 1 - |Tr(u X^dag)|^2 / 4.

The normalization by d^2 = 4 makes g = 0 exactly for u = X up to a global
phase and g = 1 for complete leakage or u = I.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .propagator import FAST_TOL, PropagationRequest, propagate, propagate_goat
from .pulse import Envelope, PulseParams
from .spin_model import SpinSystem

TARGET_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
TARGET_X.flags.writeable = False


@dataclass(frozen=True)
class QubitSubspace:
    """Full-space indices of (|0, nuclei down>, |-1, nuclei down>)."""

    indices: tuple[int, int]
    dimension: int

    def __post_init__(self):
        i0, i1 = self.indices
        if i0 == i1:
            raise ValueError("qubit basis indices must be distinct")
        if not (0 <= i0 < self.dimension and 0 <= i1 < self.dimension):
            raise ValueError("qubit basis indices out of range")

    @classmethod
    def for_system(cls, system: SpinSystem) -> "QubitSubspace":
        return cls((system.polarized_index(0), system.polarized_index(-1)), system.dimension)

    @property
    def projector(self) -> np.ndarray:
        """Isometry of shape (dimension, 2)."""
        p = np.zeros((self.dimension, 2))
        p[self.indices[0], 0] = 1.0
        p[self.indices[1], 1] = 1.0
        return p


def _columns(mat: np.ndarray, sub: QubitSubspace) -> np.ndarray:
    """Qubit columns of a full matrix; a (d, 2) block is assumed to hold them already."""
    if mat.shape[-1] == sub.dimension:
        return mat[..., list(sub.indices)]
    if mat.shape[-1] == 2:
        return mat
    raise ValueError(f"expected {sub.dimension} or 2 columns, got shape {mat.shape}")


def project_qubit(U: np.ndarray, sub: QubitSubspace) -> np.ndarray:
    """u = P^dag U P.  ``U`` may be the full propagator or just its two qubit columns."""
    if U.shape[-2] != sub.dimension:
        raise ValueError(f"propagator has {U.shape[-2]} rows, subspace expects {sub.dimension}")
    return _columns(U, sub)[..., list(sub.indices), :]


def frame_rotation(h0: np.ndarray, duration: float) -> np.ndarray:
    """exp(+i H0 T) from the eigendecomposition of the (angular) drift."""
    energies, vectors = np.linalg.eigh(h0)
    return (vectors * np.exp(1j * energies * duration)) @ vectors.conj().T


def rotating_frame_correct(U: np.ndarray, h0: np.ndarray, duration: float) -> np.ndarray:
    if duration == 0:
        return np.array(U, dtype=complex)
    return frame_rotation(h0, duration) @ U


def infidelity(u: np.ndarray) -> float:
    overlap = np.trace(u @ TARGET_X.conj().T)
    return float(1.0 - abs(overlap) ** 2 / 4.0)


def infidelity_gradient(
    u: np.ndarray,
    sensitivities: np.ndarray,
    sub: QubitSubspace,
    frame: np.ndarray | None = None,
) -> np.ndarray:
    """dg/dalpha_k from the lab-frame sensitivities dU/dalpha_k.

    ``u`` is the projected (already frame-corrected) 2x2 block.  ``frame`` is
    the rotation exp(+i H0 T) applied to U, or None if no correction was used.
    """
    sens = np.asarray(sensitivities)
    if sens.ndim != 3 or sens.shape[1] != sub.dimension:
        raise ValueError(f"sensitivities must be (n_params, {sub.dimension}, m), got {sens.shape}")
    if u.shape != (2, 2):
        raise ValueError("u must be the projected 2x2 block")
    cols = _columns(sens, sub)
    rows = list(sub.indices)
    if frame is None:
        du = cols[:, rows, :]
    else:
        du = np.einsum("ij,kjl->kil", frame[rows, :], cols)
    xd = TARGET_X.conj().T
    overlap = np.trace(u @ xd)
    d_overlap = np.einsum("kij,ji->k", du, xd)
    return -0.5 * np.real(d_overlap * np.conj(overlap))


@dataclass(frozen=True)
class ControlProblem:
    """Find a pulse of duration T with N sinusoidal components inverting the qubit."""

    system: SpinSystem
    duration: float
    n_basis: int
    ramp_fraction: float = 0.3
    frame_correction: bool = True

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.n_basis < 1:
            raise ValueError("need at least one basis function")

    @property
    def envelope(self) -> Envelope:
        return Envelope.for_duration(self.duration, self.ramp_fraction)


class InfidelityObjective:
    """g(alpha) and its GOAT gradient for a control problem at a fixed tolerance.

    Only the two qubit columns of U and of every sensitivity are propagated.
    """

    def __init__(self, problem: ControlProblem, tol: float = FAST_TOL):
        self.problem = problem
        self.tol = tol
        self.subspace = QubitSubspace.for_system(problem.system)
        self._p = self.subspace.projector.astype(complex)
        h0 = problem.system.drift
        self._frame = frame_rotation(h0, problem.duration) if problem.frame_correction else None
        self.evaluations = 0

    def _request(self, alpha, want_gradient: bool) -> PropagationRequest:
        params = PulseParams(alpha)
        if params.n_basis != self.problem.n_basis:
            raise ValueError(f"expected {3 * self.problem.n_basis} parameters, got {params.alpha.size}")
        return PropagationRequest(
            self.problem.system,
            params,
            self.problem.envelope,
            atol=self.tol,
            rtol=self.tol,
            want_gradient=want_gradient,
            initial_state=self._p,
        )

    def _project(self, block: np.ndarray) -> np.ndarray:
        if self._frame is not None:
            block = self._frame[list(self.subspace.indices), :] @ block
            return block
        return block[list(self.subspace.indices), :]

    def qubit_block(self, alpha) -> np.ndarray:
        """Projected 2x2 evolution u(alpha, T)."""
        result = propagate(self._request(alpha, False))
        self.evaluations += 1
        return self._project(result.U_final)

    def value(self, alpha) -> float:
        return infidelity(self.qubit_block(alpha))

    def value_and_gradient(self, alpha) -> tuple[float, np.ndarray]:
        result = propagate_goat(self._request(alpha, True))
        self.evaluations += 1
        u = self._project(result.U_final)
        grad = infidelity_gradient(u, result.sensitivities, self.subspace, self._frame)
        return infidelity(u), grad
