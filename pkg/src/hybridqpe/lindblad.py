"""Master-equation dynamics in Liouville space.

Builds Liouvillian superoperators from a Hamiltonian plus collapse
channels, exponentiates them into trace-preserving step propagators,
evolves density operators along piecewise-constant Hamiltonian
schedules, and reconstructs process (chi) matrices for tomography.

The generator implements the standard Lindblad form

    drho/dt = -i [H, rho] + sum_k gamma_k (A_k rho A_k^dag
                                           - 1/2 {A_k^dag A_k, rho})

with hbar = 1, time in ns and angular frequencies in rad/ns.  A rate
quoted as a linear frequency f (GHz) therefore enters as 2*pi*f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product as iproduct
from typing import Callable, Sequence

import numpy as np

from . import qcore
from ._expm import expm
from .qcore import (
    DensityOperator,
    DimensionError,
    HilbertSpace,
    Operator,
    SuperOperator,
    dag,
    unvec,
    vec,
)

__all__ = [
    "CollapseChannel",
    "Liouvillian",
    "Propagator",
    "ChiMatrix",
    "InstabilityError",
    "build_liouvillian",
    "step_propagator",
    "evolve",
    "schedule_superoperator",
    "process_tomography",
    "pauli_strings",
    "unitary_superoperator",
    "choi_matrix",
    "hamiltonian_superoperator",
    "dissipator_superoperator",
]

# Tolerances owned by this layer (see qcore for the state-level ones).
GENERATOR_SPLIT_TOL = 1e-12   # generator == hamiltonian_part + dissipator_part
TRACELESS_TOL = 1e-10         # |Tr(L[rho])| for any rho
TRACE_PRESERVING_TOL = 1e-8   # propagator trace preservation
INSTABILITY_TOL = 1e-6        # mid-evolution invariant violation -> error


class InstabilityError(RuntimeError):
    """Numerical instability during evolution; carries the first bad time."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class CollapseChannel:
    """A Lindblad jump operator paired with its rate (rad/ns)."""

    operator: Operator
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"collapse rate must be nonnegative, got {self.rate}")


@dataclass(frozen=True)
class Liouvillian:
    """Master-equation generator split into coherent and dissipative parts."""

    space: HilbertSpace
    generator: SuperOperator
    hamiltonian_part: SuperOperator
    dissipator_part: SuperOperator

    def __post_init__(self):
        split = np.max(np.abs(self.generator.matrix
                              - self.hamiltonian_part.matrix
                              - self.dissipator_part.matrix))
        if split > GENERATOR_SPLIT_TOL:
            raise ValueError(f"generator != hamiltonian + dissipator (defect {split:.3e})")
        d = self.space.total_dim
        trace_row = vec(np.eye(d, dtype=complex)) @ self.generator.matrix
        defect = np.max(np.abs(trace_row))
        if defect > TRACELESS_TOL * max(1.0, np.max(np.abs(self.generator.matrix))):
            raise ValueError(f"generator does not annihilate the trace (defect {defect:.3e})")


@dataclass(frozen=True)
class Propagator:
    """exp(L dt): a trace-preserving, completely positive step map.

    Trace preservation is enforced at construction; complete positivity
    (Choi spectrum) is checked by the test suite, since the Choi matrix
    is quadratically larger than the map.
    """

    space: HilbertSpace
    map: SuperOperator
    dt: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.map.matrix)):
            raise FloatingPointError("propagator contains non-finite entries")
        d = self.space.total_dim
        iv = vec(np.eye(d, dtype=complex))
        defect = np.max(np.abs(iv @ self.map.matrix - iv))
        if defect > TRACE_PRESERVING_TOL:
            raise ValueError(f"propagator is not trace preserving (defect {defect:.3e})")

    def apply(self, rho: DensityOperator) -> DensityOperator:
        return DensityOperator(self.space, unvec(self.map.matrix @ vec(rho.matrix)))


def hamiltonian_superoperator(h: np.ndarray) -> np.ndarray:
    """Matrix of rho -> -i[H, rho] under column stacking."""
    d = h.shape[0]
    ident = np.eye(d, dtype=complex)
    return -1j * (np.kron(ident, h) - np.kron(h.T, ident))


def dissipator_superoperator(a: np.ndarray, rate: float) -> np.ndarray:
    """Matrix of the single-channel dissipator gamma*(A.A^dag - 1/2{A^dag A,.})."""
    d = a.shape[0]
    ident = np.eye(d, dtype=complex)
    ada = dag(a) @ a
    return rate * (np.kron(a.conj(), a)
                   - 0.5 * np.kron(ident, ada)
                   - 0.5 * np.kron(ada.T, ident))


def build_liouvillian(h: Operator, channels: Sequence[CollapseChannel] = ()) -> Liouvillian:
    """Assemble the Lindblad generator for a Hamiltonian and its channels."""
    space = h.space
    hm = h.matrix
    defect = np.max(np.abs(hm - dag(hm)))
    if defect > qcore.get_tolerance("hermitian") * max(1.0, np.max(np.abs(hm))):
        raise ValueError(f"Hamiltonian is not Hermitian (defect {defect:.3e})")
    ham_part = hamiltonian_superoperator(hm)
    d2 = space.total_dim ** 2
    diss_part = np.zeros((d2, d2), dtype=complex)
    for ch in channels:
        if ch.operator.space.total_dim != space.total_dim:
            raise DimensionError("collapse operator lives on a different space")
        if ch.rate == 0.0:
            continue
        diss_part += dissipator_superoperator(ch.operator.matrix, ch.rate)
    return Liouvillian(
        space=space,
        generator=SuperOperator(space, ham_part + diss_part),
        hamiltonian_part=SuperOperator(space, ham_part),
        dissipator_part=SuperOperator(space, diss_part),
    )


def step_propagator(liouvillian: Liouvillian, dt: float) -> Propagator:
    """exp(generator * dt) by Pade scaling-and-squaring."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m = expm(liouvillian.generator.matrix * dt)
    return Propagator(liouvillian.space, SuperOperator(liouvillian.space, m), dt)


def _check_state(m: np.ndarray, t: float) -> None:
    herm = np.max(np.abs(m - dag(m)))
    tr = abs(m.trace() - 1.0)
    lo = float(np.linalg.eigvalsh((m + dag(m)) / 2.0)[0])
    if herm > INSTABILITY_TOL or tr > INSTABILITY_TOL or lo < -INSTABILITY_TOL:
        raise InstabilityError(
            f"state invariants violated at t = {t:.6g} ns "
            f"(hermiticity {herm:.2e}, trace defect {tr:.2e}, min eigenvalue {lo:.2e})",
            time=t,
        )


def evolve(
    rho0: DensityOperator,
    segments: Sequence[tuple[Operator, float]],
    channels: Sequence[CollapseChannel] = (),
    sample_times: Sequence[float] = (),
) -> list[DensityOperator]:
    """Evolve along piecewise-constant Hamiltonian segments.

    ``segments`` is a list of (Hamiltonian, duration) pairs sharing the
    channel list; the trajectory is returned at ``sample_times``
    (sorted, within the total duration).  Invariant violations beyond
    ``INSTABILITY_TOL`` raise :class:`InstabilityError` naming the first
    bad time.
    """
    times = [float(t) for t in sample_times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("sample_times must be sorted")
    total = 0.0
    for _, duration in segments:
        if duration <= 0:
            raise ValueError("segment durations must be positive")
        total += duration
    eps = 1e-12 * max(1.0, total)
    if times and (times[0] < -eps or times[-1] > total + eps):
        raise ValueError(f"sample_times must lie within [0, {total}]")

    out: list[DensityOperator] = []
    state = vec(rho0.matrix)
    t_cur = 0.0
    idx = 0
    # samples at (or numerically before) t = 0 are the initial state
    while idx < len(times) and times[idx] <= eps:
        out.append(rho0)
        idx += 1
    seg_start = 0.0
    for h, duration in segments:
        liou = build_liouvillian(h, channels)
        seg_end = seg_start + duration
        while idx < len(times) and times[idx] <= seg_end + eps:
            t = min(times[idx], seg_end)
            if t - t_cur > eps:
                state = expm(liou.generator.matrix * (t - t_cur)) @ state
                t_cur = t
            m = unvec(state, rho0.space.total_dim)
            _check_state(m, times[idx])
            try:
                out.append(DensityOperator(rho0.space, m))
            except ValueError as exc:
                raise InstabilityError(f"{exc} at t = {times[idx]:.6g} ns",
                                       time=times[idx]) from exc
            idx += 1
        if seg_end - t_cur > eps:
            state = expm(liou.generator.matrix * (seg_end - t_cur)) @ state
            t_cur = seg_end
        seg_start = seg_end
    return out


def schedule_superoperator(
    segments: Sequence[tuple[Operator, float]],
    channels: Sequence[CollapseChannel] = (),
) -> SuperOperator:
    """Total propagator superoperator of a piecewise-constant schedule."""
    if not segments:
        raise ValueError("schedule needs at least one segment")
    space = segments[0][0].space
    total = np.eye(space.total_dim ** 2, dtype=complex)
    for h, duration in segments:
        liou = build_liouvillian(h, channels)
        total = expm(liou.generator.matrix * duration) @ total
    return SuperOperator(space, total)


# ---------------------------------------------------------------------------
# process tomography


_PAULI_1Q = {
    "i": np.eye(2, dtype=complex),
    "x": qcore.SIGMA_X,
    "y": qcore.SIGMA_Y,
    "z": qcore.SIGMA_Z,
}


def pauli_strings(n_qubits: int) -> tuple[list[str], np.ndarray]:
    """All n-qubit Pauli strings in lexicographic (i, x, y, z) order.

    Returns lowercase labels ('ii', 'ix', ...) and a stacked array of
    the corresponding (unnormalized) matrices.
    """
    labels = []
    mats = []
    for combo in iproduct("ixyz", repeat=n_qubits):
        labels.append("".join(combo))
        m = np.array([[1.0 + 0j]])
        for c in combo:
            m = np.kron(m, _PAULI_1Q[c])
        mats.append(m)
    return labels, np.stack(mats)


@dataclass(frozen=True)
class ChiMatrix:
    """Process matrix in the Pauli-string basis.

    The expansion convention is Lambda(rho) = sum_mn chi[m, n] P_m rho P_n
    with unnormalized Pauli strings, under which Tr(chi) = 1 for any
    trace-preserving map and a unitary U = sum_m c_m P_m has
    chi = c c^dag.
    """

    basis: tuple[str, ...]
    entries: np.ndarray
    fidelity: float

    def __post_init__(self):
        d2 = len(self.basis)
        e = np.asarray(self.entries, dtype=complex)
        if e.shape != (d2, d2):
            raise DimensionError(f"chi matrix shape {e.shape} does not match basis size {d2}")
        herm = np.max(np.abs(e - dag(e)))
        if herm > 1e-8:
            raise ValueError(f"chi matrix not Hermitian (defect {herm:.3e})")
        object.__setattr__(self, "entries", e)


def unitary_superoperator(u: np.ndarray) -> np.ndarray:
    """Column-stacking superoperator of rho -> U rho U^dag."""
    return np.kron(u.conj(), u)


def _as_channel(map_under_test) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(map_under_test, Propagator):
        s = map_under_test.map.matrix
    elif isinstance(map_under_test, SuperOperator):
        s = map_under_test.matrix
    elif isinstance(map_under_test, np.ndarray):
        s = map_under_test
    elif callable(map_under_test):
        return map_under_test
    else:
        raise TypeError(f"cannot interpret {type(map_under_test).__name__} as a channel")
    dim = math.isqrt(s.shape[0])
    return lambda m: unvec(s @ vec(m), dim)


def process_tomography(map_under_test, n_qubits: int,
                       ideal: Operator | np.ndarray | None = None) -> ChiMatrix:
    """Reconstruct the chi matrix of a qubit channel by linear inversion.

    The d^2 Pauli-string basis operators are pushed through the channel
    and the expansion Lambda(rho) = sum chi[m,n] P_m rho P_n is solved
    exactly.  When an ideal unitary is supplied, ``fidelity`` holds the
    process fidelity Tr(chi_ideal chi) against it, else NaN.
    """
    d = 2 ** n_qubits
    channel = _as_channel(map_under_test)
    labels, paulis = pauli_strings(n_qubits)
    d2 = d * d

    outputs = np.stack([channel(p) for p in paulis])          # (d2, d, d)
    r = np.einsum("jab,kba->jk", paulis, outputs) / d          # Tr(P_j Lambda(P_k))/d

    # Tr(P_j P_m P_k P_n)/d, arranged as a (d2*d2, d2*d2) linear system
    pmk = np.einsum("mab,kbc->mkac", paulis, paulis)
    t = np.einsum("jba,mkac,ncb->jkmn", paulis, pmk, paulis) / d
    chi_vec = np.linalg.solve(t.reshape(d2 * d2, d2 * d2), r.reshape(d2 * d2))
    chi = chi_vec.reshape(d2, d2)
    chi = (chi + dag(chi)) / 2.0

    fidelity = float("nan")
    if ideal is not None:
        u = ideal.matrix if isinstance(ideal, Operator) else np.asarray(ideal, dtype=complex)
        if u.shape != (d, d):
            raise DimensionError(f"ideal gate of shape {u.shape} does not fit {n_qubits} qubits")
        coeffs = np.einsum("mab,ba->m", paulis, u) / d
        fidelity = float(np.real(coeffs.conj() @ chi @ coeffs))
    return ChiMatrix(tuple(labels), chi, fidelity)


def choi_matrix(map_under_test, dim: int) -> np.ndarray:
    """Choi matrix J = sum_ab |a><b| (x) Lambda(|a><b|) of a channel."""
    channel = _as_channel(map_under_test)
    j = np.zeros((dim * dim, dim * dim), dtype=complex)
    basis = np.zeros((dim, dim), dtype=complex)
    for a in range(dim):
        for b in range(dim):
            basis[a, b] = 1.0
            j += np.kron(basis, channel(basis))
            basis[a, b] = 0.0
    return j
