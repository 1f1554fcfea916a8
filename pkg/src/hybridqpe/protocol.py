"""Distributed phase estimation across the flux / Rydberg device pair.

The two devices share no direct gates; every cross-device controlled
operation consumes one fresh entangled pair (E2 gate) on the two
communication qubits and runs the standard teleported-control sequence:

    CNOT(control -> ebit_A), measure ebit_A, conditional X corrections,
    local controlled-U(ebit_B -> target), H(ebit_B), measure ebit_B,
    conditional Z(control),

with the communication qubits reset to |0> afterwards.  Classical
messages are instantaneous and lossless.

Circuits are built as flat plans (gates, entangling ops, measurements,
conditional corrections) and executed on a dense density matrix either
by per-shot sampling of the mid-circuit measurements or in a
deterministic deferred-measurement mode where corrections become
coherent controlled gates (used for oracle comparisons and channel
extraction).  Gates are realized by a provider: exact unitaries, or
noisy propagators synthesized per instance by GRAPE against the owning
device's noise model.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import models
from ._expm import expm
from .grape import GrapeProblem, optimize, referenced_gate_target
from .lindblad import build_liouvillian, evolve, unitary_superoperator
from .models import FluxParams, HybridParams, RydbergParams
from .qcore import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    DensityOperator,
    HilbertSpace,
    Operator,
    SuperOperator,
    apply_local_superop,
    apply_local_unitary,
    dag,
    embed,
    partial_trace_array,
    qubit_space,
    replace_subsystems,
)

__all__ = [
    "DeviceLayout",
    "ProtocolStep",
    "ShotRecord",
    "ProtocolError",
    "GateUnavailableError",
    "SynthesisSettings",
    "IdealGateProvider",
    "GrapeGateProvider",
    "default_layout",
    "bell_state",
    "hadamard",
    "phase_unitary",
    "controlled",
    "e2_entangle",
    "bell_pair_from_hybrid",
    "bell_fidelity_curve",
    "nonlocal_controlled_u",
    "nonlocal_controlled_u_choi",
    "local_controlled_u_choi",
    "inverse_qft_ops",
    "distributed_inverse_qft",
    "build_qpe_plan",
    "run_qpe",
    "qpe_distribution",
    "expected_bitstring",
]


class ProtocolError(RuntimeError):
    """Protocol-sequencing violation (e.g. non-local gate without a pair)."""


class GateUnavailableError(KeyError):
    """The gate provider cannot supply a required gate."""


# ---------------------------------------------------------------------------
# gates

HADAMARD = np.array([[1.0, 1.0], [1.0, -1.0]], dtype=complex) / math.sqrt(2.0)


def hadamard() -> np.ndarray:
    return HADAMARD.copy()


def phase_unitary(phi: float) -> np.ndarray:
    """diag(1, e^{2 pi i phi}) -- the QPE unitary for phase phi."""
    return np.diag([1.0, np.exp(2j * math.pi * phi)]).astype(complex)


def controlled(u: np.ndarray) -> np.ndarray:
    """Controlled-U on (control, target) site order."""
    d = u.shape[0]
    out = np.eye(2 * d, dtype=complex)
    out[d:, d:] = u
    return out


SWAP = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=complex)


def bell_state() -> np.ndarray:
    """(|00> + |11>)/sqrt(2) as a 4x4 density matrix."""
    v = np.zeros(4, dtype=complex)
    v[0] = v[3] = 1.0 / math.sqrt(2.0)
    return np.outer(v, v.conj())


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class DeviceLayout:
    """Assignment of register qubits to the two devices.

    ``flux_qubits`` holds (state qubit, flux communication qubit);
    ``rydberg_qubits`` holds (rydberg communication qubit, counting
    qubits...).  ``counting_order`` lists the counting qubits most
    significant first and may include one extra flux-side counting
    qubit (``flux_counting``).
    """

    flux_qubits: tuple[int, int]
    rydberg_qubits: tuple[int, ...]
    counting_order: tuple[int, ...]
    flux_counting: int | None = None

    def __post_init__(self):
        flux_set = set(self.flux_qubits) | ({self.flux_counting}
                                            if self.flux_counting is not None else set())
        ryd_set = set(self.rydberg_qubits)
        if flux_set & ryd_set:
            raise ValueError("flux and rydberg index sets must be disjoint")
        allowed_counting = set(self.rydberg_qubits[1:])
        if self.flux_counting is not None:
            allowed_counting.add(self.flux_counting)
        if not set(self.counting_order) <= allowed_counting:
            raise ValueError("counting_order must consist of declared counting qubits")
        if len(set(self.counting_order)) != len(self.counting_order):
            raise ValueError("counting_order has repeated qubits")

    @property
    def state_qubit(self) -> int:
        return self.flux_qubits[0]

    @property
    def flux_comm(self) -> int:
        return self.flux_qubits[1]

    @property
    def ryd_comm(self) -> int:
        return self.rydberg_qubits[0]

    @property
    def n_qubits(self) -> int:
        n = len(self.flux_qubits) + len(self.rydberg_qubits)
        return n + (1 if self.flux_counting is not None else 0)

    @property
    def n_counting(self) -> int:
        return len(self.counting_order)

    @property
    def space(self) -> HilbertSpace:
        return qubit_space(self.n_qubits)

    def device_of(self, qubit: int) -> str:
        if qubit in self.flux_qubits or qubit == self.flux_counting:
            return "flux"
        if qubit in self.rydberg_qubits:
            return "rydberg"
        raise ValueError(f"qubit {qubit} not in layout")


def default_layout(n_counting: int = 4) -> DeviceLayout:
    """The paper-shaped register: flux {state, comm}, Rydberg {comm, counting}.

    For n_counting >= 2 one counting qubit is co-located on the flux
    device (it controls the lowest-order U^(2^0) locally, next to the
    state qubit) and the remaining n-1 live on the Rydberg device as
    the more significant bits.
    """
    if n_counting < 1:
        raise ValueError("need at least one counting qubit")
    if n_counting == 1:
        return DeviceLayout(flux_qubits=(0, 1), rydberg_qubits=(2, 3),
                            counting_order=(3,), flux_counting=None)
    n_ryd_counting = n_counting - 1
    flux_counting = 2
    ryd = tuple(range(3, 3 + 1 + n_ryd_counting))
    counting = tuple(ryd[1:]) + (flux_counting,)
    return DeviceLayout(flux_qubits=(0, 1), rydberg_qubits=ryd,
                        counting_order=counting, flux_counting=flux_counting)


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class GateInstance:
    label: str
    sites: tuple[int, ...]
    matrix: np.ndarray
    device: str
    synthesize: bool = True
    cond_key: str | None = None       # apply only if this measurement read 1
    is_reset: bool = False            # conditional X returning a measured qubit to |0>


@dataclass(frozen=True)
class Entangle:
    pass


@dataclass(frozen=True)
class Measure:
    site: int
    key: str
    consumes: bool = False    # final measurement of a teleportation: pair is spent


PlanOp = "GateInstance | Entangle | Measure"


@dataclass(frozen=True)
class ProtocolStep:
    """One transcript entry: E2, local_gate, measure_ebit or classical_correction."""

    kind: str
    payload: dict

    def __post_init__(self):
        if self.kind not in ("E2", "local_gate", "measure_ebit", "classical_correction"):
            raise ValueError(f"unknown protocol step kind {self.kind!r}")


def _nonlocal_ops(control: int, target: int, u: np.ndarray, layout: DeviceLayout,
                  tag: str) -> list:
    """The teleported controlled-U sequence (fresh pair assumed)."""
    dev_c = layout.device_of(control)
    ebit_a = layout.flux_comm if dev_c == "flux" else layout.ryd_comm
    dev_b = "rydberg" if dev_c == "flux" else "flux"
    ebit_b = layout.ryd_comm if dev_c == "flux" else layout.flux_comm
    if layout.device_of(target) != dev_b:
        raise ProtocolError("nonlocal gate requires control and target on different devices")
    k1, k2 = f"{tag}.mA", f"{tag}.mB"
    return [
        Entangle(),
        GateInstance("CNOT", (control, ebit_a), controlled(SIGMA_X), dev_c),
        Measure(ebit_a, k1),
        GateInstance("X", (ebit_a,), SIGMA_X.copy(), dev_c, synthesize=False,
                     cond_key=k1, is_reset=True),
        GateInstance("X", (ebit_b,), SIGMA_X.copy(), dev_b, synthesize=False, cond_key=k1),
        GateInstance("CU", (ebit_b, target), controlled(u), dev_b),
        GateInstance("H", (ebit_b,), hadamard(), dev_b),
        Measure(ebit_b, k2, consumes=True),
        GateInstance("X", (ebit_b,), SIGMA_X.copy(), dev_b, synthesize=False,
                     cond_key=k2, is_reset=True),
        GateInstance("Z", (control,), SIGMA_Z.copy(), dev_c, synthesize=False, cond_key=k2),
    ]


def _controlled_phase_ops(control: int, target: int, phase: float, layout: DeviceLayout,
                          tag: str) -> list:
    u = np.diag([1.0, np.exp(1j * phase)]).astype(complex)
    if layout.device_of(control) == layout.device_of(target):
        return [GateInstance(f"CP({phase:+.6f})", (control, target), controlled(u),
                             layout.device_of(control))]
    return _nonlocal_ops(control, target, u, layout, tag)


def inverse_qft_ops(qubits: Sequence[int], layout: DeviceLayout,
                    physical_reversal: bool = False, tag: str = "iqft") -> tuple[list, list]:
    """Gate plan of the inverse QFT over ``qubits`` (most significant first).

    Returns (ops, readout_order).  The rotation network composes to the
    inverse DFT times a bit-reversal permutation on the output wires;
    with ``physical_reversal`` the reversal is undone by trailing SWAP
    gates (cross-device swaps expand into three teleported CNOTs each)
    so the composed sequence equals the inverse DFT unitary exactly and
    the readout order is the register order.  Without it the reversal
    is classical: the returned readout order is the reversed register,
    which costs nothing and is indistinguishable at computational-basis
    readout.
    """
    qubits = list(qubits)
    n = len(qubits)
    ops: list = []
    # inverse of the textbook no-swap QFT gate list, on the reversed register
    q = qubits[::-1]
    for i in range(n - 1, -1, -1):
        for j in range(n - 1, i, -1):
            angle = -2.0 * math.pi / (2 ** (j - i + 1))
            ops.extend(_controlled_phase_ops(q[j], q[i], angle, layout,
                                             tag=f"{tag}.cp{i}.{j}"))
        ops.append(GateInstance("H", (q[i],), hadamard(), layout.device_of(q[i])))
    if not physical_reversal:
        return ops, qubits[::-1]
    for i in range(n // 2):
        a, b = qubits[i], qubits[n - 1 - i]
        if layout.device_of(a) == layout.device_of(b):
            ops.append(GateInstance("SWAP", (a, b), SWAP.copy(), layout.device_of(a)))
        else:
            ops.extend(_nonlocal_ops(a, b, SIGMA_X, layout, tag=f"{tag}.sw{i}a"))
            ops.extend(_nonlocal_ops(b, a, SIGMA_X, layout, tag=f"{tag}.sw{i}b"))
            ops.extend(_nonlocal_ops(a, b, SIGMA_X, layout, tag=f"{tag}.sw{i}c"))
    return ops, qubits


def build_qpe_plan(phi_true: float, layout: DeviceLayout,
                   physical_reversal: bool = False) -> tuple[list, list]:
    """Full phase-estimation plan; returns (ops, readout_order).

    Counting qubit with weight 2^k controls U^(2^k) on the state qubit
    (non-local when it lives on the Rydberg device), followed by the
    distributed inverse QFT over the counting register.
    """
    if not 0.0 <= phi_true < 1.0:
        raise ValueError(f"phi_true must lie in [0, 1), got {phi_true}")
    ops: list = []
    n = layout.n_counting
    for q in layout.counting_order:
        ops.append(GateInstance("H", (q,), hadamard(), layout.device_of(q)))
    for idx, q in enumerate(layout.counting_order):
        k = n - 1 - idx                      # MSB first -> weight 2^(n-1)
        u = phase_unitary((phi_true * (2 ** k)) % 1.0)
        if layout.device_of(q) == "flux":
            ops.append(GateInstance(f"CU(2^{k})", (q, layout.state_qubit), controlled(u),
                                    "flux"))
        else:
            ops.extend(_nonlocal_ops(q, layout.state_qubit, u, layout, tag=f"ladder{k}"))
    iqft, readout = inverse_qft_ops(layout.counting_order, layout,
                                    physical_reversal=physical_reversal)
    ops.extend(iqft)
    return ops, readout


# ---------------------------------------------------------------------------
# gate providers


@dataclass(frozen=True)
class SynthesisSettings:
    """Knobs of per-gate GRAPE synthesis used by the noisy provider."""

    iterations: int = 200
    time_steps: int = 100
    epsilon: float = 0.2
    mode: str = "gradient-ascent"
    u_max: float = 2.0 * math.pi
    x_min: float = 1e-5
    gate_time_1q: float = 5.0
    gate_time_2q: float = 20.0
    target_mode: str = "referenced"       # 'referenced' (state-transfer) | 'gate'
    control_axes: str = "xyz"
    seed: int = 0


class IdealGateProvider:
    """Supplies every gate as its exact unitary."""

    def realize(self, plan: Sequence, refs: dict) -> dict:
        return {i: ("unitary", op.matrix) for i, op in enumerate(plan)
                if isinstance(op, GateInstance) and op.synthesize}


class GrapeGateProvider:
    """Synthesizes each gate instance on its owning device's noise model.

    Synthesis happens once per instance (deduplicated on the gate
    matrix and the reference state) and the resulting propagators are
    shared read-only across shots.  Conditional Pauli corrections and
    measurement resets stay ideal: they are classically triggered frame
    flips, and synthesizing them per measurement branch would break the
    one-synthesis-per-instance sharing.
    """

    def __init__(self, flux_params: FluxParams, rydberg_params: RydbergParams,
                 settings: SynthesisSettings):
        self.flux_params = flux_params
        self.rydberg_params = rydberg_params
        self.settings = settings
        self._cache: dict = {}
        self.results: dict = {}

    def _drift(self, device: str, n_sites: int):
        if device == "flux":
            h = models.flux_register_hamiltonian(self.flux_params, n_sites)
            ch = models.flux_register_channels(self.flux_params, n_sites)
        else:
            p = replace(self.rydberg_params, n_atoms=n_sites)
            h = models.rydberg_hamiltonian(p)
            ch = models.rydberg_channels(p)
        return build_liouvillian(h, ch)

    def _controls(self, n_sites: int) -> list[Operator]:
        space = qubit_space(n_sites)
        axes = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}
        out = []
        for q in range(n_sites):
            for ax in self.settings.control_axes:
                local = Operator(qubit_space(1), axes[ax], hermitian_hint=True)
                out.append(embed(local, q, space))
        return out

    def synthesize(self, gate: GateInstance, sigma_ref: np.ndarray):
        n = len(gate.sites)
        s = self.settings
        key = (gate.label, gate.device, n,
               hashlib.blake2b(np.round(gate.matrix, 12).tobytes(), digest_size=12).hexdigest(),
               hashlib.blake2b(np.round(sigma_ref, 10).tobytes(), digest_size=12).hexdigest()
               if s.target_mode == "referenced" else "")
        if key in self._cache:
            return self._cache[key]
        space = qubit_space(n)
        if s.target_mode == "referenced":
            target = referenced_gate_target(gate.matrix, sigma_ref, space)
        elif s.target_mode == "gate":
            target = SuperOperator(space, unitary_superoperator(gate.matrix))
        else:
            raise ValueError(f"unknown target_mode {s.target_mode!r}")
        seed = int.from_bytes(
            hashlib.blake2b(repr((key, s.seed)).encode(), digest_size=8).digest(), "big")
        problem = GrapeProblem(
            drift=self._drift(gate.device, n),
            controls=self._controls(n),
            target=target,
            n_steps=s.time_steps,
            total_time=s.gate_time_1q if n == 1 else s.gate_time_2q,
            max_iterations=s.iterations,
            step_size=s.epsilon,
            min_error=s.x_min,
            mode=s.mode,
            seed=seed,
            u_max=s.u_max,
        )
        result = optimize(problem)
        out = ("superop", result.total_propagator.matrix)
        self._cache[key] = out
        self.results[key] = result
        return out

    def realize(self, plan: Sequence, refs: dict) -> dict:
        out = {}
        for i, op in enumerate(plan):
            if isinstance(op, GateInstance) and op.synthesize:
                if i not in refs:
                    raise GateUnavailableError(f"no reference state for gate {op.label} at {i}")
                out[i] = self.synthesize(op, refs[i])
        return out


# ---------------------------------------------------------------------------
# E2 entanglement source


def _frame_aligned_pair(rho4: np.ndarray) -> np.ndarray:
    """Apply the calibrated local Z frame so the |00>,|11> coherence is real."""
    c = rho4[0, 3]
    if abs(c) < 1e-15:
        return rho4
    z = np.diag([1.0, 1.0, 1.0, np.exp(1j * np.angle(c))]).astype(complex)
    return z @ rho4 @ dag(z)


def _flux_eigenbasis(p: HybridParams) -> np.ndarray:
    """Columns [ground, excited] of the local flux Hamiltonian, gauge-fixed."""
    hf_local = -0.5 * p.eps_f * SIGMA_Z - 0.5 * p.delta_f * SIGMA_X
    _, evecs = np.linalg.eigh(hf_local)
    for c in range(2):
        k = np.argmax(np.abs(evecs[:, c]))
        evecs[:, c] *= np.exp(-1j * np.angle(evecs[k, c]))
    return evecs


def _hybrid_initial(p: HybridParams) -> DensityOperator:
    """Flux excited eigenstate (x) vacuum (x) atom ground."""
    nf = p.fock_dim
    excited = _flux_eigenbasis(p)[:, 1]
    vac = np.zeros(nf, dtype=complex)
    vac[0] = 1.0
    atom_g = np.zeros(3, dtype=complex)
    atom_g[models.ATOM_G] = 1.0
    psi0 = np.kron(np.kron(excited, vac), atom_g)
    return DensityOperator(models.hybrid_space(p), np.outer(psi0, psi0.conj()))


def _extract_pair(rho_t: np.ndarray, p: HybridParams, t: float) -> tuple[np.ndarray, float]:
    """Map a hybrid-space state at time t to the (flux, atom) qubit pair.

    Unwinds the free-Hamiltonian interaction frame, rotates the flux
    factor into its energy eigenbasis (ground = |0>), traces the
    resonator, projects the atom onto {g, e} -> {0, 1}, applies the X
    frame flip on the flux side and the calibrated local Z frame
    alignment.  Returns the pair and the population left outside it
    (photon not retrieved, atomic |u> level).
    """
    nf = p.fock_dim
    terms = models.hybrid_terms(p)
    omega_e, omega_g, omega_u = p.omega_mu
    atom_diag = np.diag([omega_e, omega_g, omega_u]).astype(complex)
    h_free = (terms["lc"].matrix
              + np.kron(np.kron(np.eye(2), np.eye(nf)), atom_diag)
              + terms["flux"].matrix)
    u_frame = expm(1j * h_free * t)
    rho_t = u_frame @ rho_t @ dag(u_frame)

    evecs = _flux_eigenbasis(p)
    v = np.kron(np.kron(evecs.conj().T, np.eye(nf)), np.eye(3))
    rho_t = v @ rho_t @ dag(v)

    rho_fa = partial_trace_array(rho_t, (2, nf, 3), keep=(0, 2))
    sel = np.zeros((4, 6), dtype=complex)
    for f in range(2):
        sel[2 * f + 0, 3 * f + models.ATOM_G] = 1.0
        sel[2 * f + 1, 3 * f + models.ATOM_E] = 1.0
    pair = sel @ rho_fa @ dag(sel)
    leak = float(1.0 - np.real(np.trace(pair)))
    pair = pair / np.real(np.trace(pair))

    x_flip = np.kron(SIGMA_X, np.eye(2))
    pair = x_flip @ pair @ dag(x_flip)
    return _frame_aligned_pair(pair), leak


def bell_pair_from_hybrid(p: HybridParams, t: float = models.GHZ_SCHEDULE_TIME,
                          with_noise: bool = True) -> tuple[np.ndarray, float]:
    """Run the coupler's entangling schedule and extract the comm pair.

    The flux qubit starts in its excited eigenstate with the resonator
    in vacuum and the atom in |g>; the detuned resonator then mediates
    a half exchange of the excitation into the atom, leaving the pair
    near (|00> + |11>)/sqrt(2) (see :func:`_extract_pair` for the frame
    conventions).  Also returns the leaked population.
    """
    h = models.hybrid_hamiltonian(p)
    channels = models.hybrid_channels(p) if with_noise else []
    rho_t = evolve(_hybrid_initial(p), [(h, t)], channels, [t])[0].matrix
    return _extract_pair(rho_t, p, t)


def bell_fidelity_curve(p: HybridParams, times: Sequence[float],
                        with_noise: bool = True) -> np.ndarray:
    """Bell overlap of the extracted pair at each time (one evolution)."""
    times = [float(t) for t in times]
    h = models.hybrid_hamiltonian(p)
    channels = models.hybrid_channels(p) if with_noise else []
    total = max(times)
    traj = evolve(_hybrid_initial(p), [(h, total)], channels, times)
    phi = np.zeros(4, dtype=complex)
    phi[0] = phi[3] = 1.0 / math.sqrt(2.0)
    out = []
    for t, rho in zip(times, traj):
        pair, _ = _extract_pair(rho.matrix, p, t)
        out.append(float(np.real(phi.conj() @ pair @ phi)))
    return np.asarray(out)


def e2_entangle(mode: str, layout: DeviceLayout,
                hybrid_params: HybridParams | None = None) -> Callable[[DensityOperator], DensityOperator]:
    """Return a transformer installing a fresh pair on the comm qubits.

    ``ideal`` injects the exact Bell state; ``physical`` runs the
    coupler schedule (:func:`bell_pair_from_hybrid`) once and injects
    the resulting noisy pair.
    """
    block = _e2_block(mode, hybrid_params)
    sites = [layout.ryd_comm, layout.flux_comm]
    dims = (2,) * layout.n_qubits

    def transform(rho: DensityOperator) -> DensityOperator:
        return DensityOperator(rho.space,
                               replace_subsystems(rho.matrix, dims, sites, block))
    return transform


@lru_cache(maxsize=8)
def _physical_pair(hybrid_params: HybridParams) -> np.ndarray:
    pair, _ = bell_pair_from_hybrid(hybrid_params)
    return pair


def _e2_block(mode: str, hybrid_params: HybridParams | None) -> np.ndarray:
    if mode == "ideal":
        return bell_state()
    if mode == "physical":
        if hybrid_params is None:
            raise ProtocolError("physical E2 mode requires hybrid parameters")
        # pair is (flux, atom); comm sites are ordered (ryd, flux)
        pair = _physical_pair(hybrid_params)
        return SWAP @ pair @ SWAP
    raise ValueError(f"unknown E2 mode {mode!r}")


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class ShotRecord:
    """One phase-estimation shot: counting bits, estimate, correctness."""

    outcome: str
    phase_estimate: float
    correct: bool

    def __post_init__(self):
        if not 0.0 <= self.phase_estimate < 1.0:
            raise ValueError("phase_estimate must lie in [0, 1)")


class _Executor:
    """Walks a plan over a dense density matrix."""

    def __init__(self, layout: DeviceLayout, channels: dict, e2_block: np.ndarray,
                 rng=None, deferred: bool = False, forced_outcomes=None,
                 apply_corrections: bool = True):
        self.layout = layout
        self.dims = (2,) * layout.n_qubits
        self.channels = channels
        self.e2_block = e2_block
        self.rng = rng
        self.deferred = deferred
        self.forced = dict(forced_outcomes or {})
        self.apply_corrections = apply_corrections
        self.bits: dict[str, int] = {}
        self.pair_fresh = False
        self.transcript: list[ProtocolStep] = []
        self.key_site: dict[str, int] = {}

    def initial_state(self) -> np.ndarray:
        d = 2 ** self.layout.n_qubits
        rho = np.zeros((d, d), dtype=complex)
        idx = 1 << (self.layout.n_qubits - 1 - self.layout.state_qubit)
        rho[idx, idx] = 1.0
        return rho

    def run(self, rho: np.ndarray, plan: Sequence) -> np.ndarray:
        for i, op in enumerate(plan):
            rho = self._apply(rho, i, op)
        return rho

    def _apply(self, rho: np.ndarray, i: int, op) -> np.ndarray:
        if isinstance(op, Entangle):
            self.pair_fresh = True
            self.transcript.append(ProtocolStep("E2", {}))
            return replace_subsystems(rho, self.dims,
                                      [self.layout.ryd_comm, self.layout.flux_comm],
                                      self.e2_block)
        if isinstance(op, Measure):
            if not self.pair_fresh:
                raise ProtocolError(
                    "non-local gate requires a fresh entangled pair (E2 not invoked)")
            if op.consumes:
                self.pair_fresh = False
            if self.deferred:
                self.key_site[op.key] = op.site
                self.transcript.append(ProtocolStep("measure_ebit",
                                                    {"site": op.site, "deferred": True}))
                return rho
            outcome, rho = self._measure(rho, op.site, op.key)
            self.bits[op.key] = outcome
            self.transcript.append(ProtocolStep("measure_ebit",
                                                {"site": op.site, "outcome": outcome}))
            return rho
        # gate
        if op.cond_key is not None:
            if not self.apply_corrections:
                return rho
            if self.deferred:
                if op.is_reset:
                    return rho          # handled by the next pair replacement
                ctrl = self.key_site[op.cond_key]
                cu = controlled(op.matrix)
                self.transcript.append(ProtocolStep(
                    "classical_correction",
                    {"label": op.label, "sites": list(op.sites), "deferred_from": ctrl}))
                return apply_local_unitary(rho, self.dims, [ctrl, *op.sites], cu)
            if not self.bits.get(op.cond_key, 0):
                return rho
            self.transcript.append(ProtocolStep(
                "classical_correction",
                {"label": op.label, "sites": list(op.sites), "from": op.cond_key}))
            return apply_local_unitary(rho, self.dims, list(op.sites), op.matrix)
        kind, matrix = self.channels.get(i, ("unitary", op.matrix))
        self.transcript.append(ProtocolStep(
            "local_gate", {"label": op.label, "sites": list(op.sites), "kind": kind}))
        if kind == "unitary":
            return apply_local_unitary(rho, self.dims, list(op.sites), matrix)
        return apply_local_superop(rho, self.dims, list(op.sites), matrix)

    def _measure(self, rho: np.ndarray, site: int, key: str) -> tuple[int, np.ndarray]:
        p1 = self._population_one(rho, site)
        if key in self.forced:
            outcome = int(self.forced[key])
        else:
            outcome = int(self.rng.random() < p1)
        proj = np.zeros((2, 2), dtype=complex)
        proj[outcome, outcome] = 1.0
        rho = apply_local_unitary(rho, self.dims, [site], proj)
        tr = np.real(np.trace(rho))
        if tr <= 1e-12:
            raise ProtocolError(f"measured an outcome of probability {tr:.2e}")
        return outcome, rho / tr

    def _population_one(self, rho: np.ndarray, site: int) -> float:
        diag = np.real(np.diag(rho)).reshape(self.dims)
        return float(diag.sum(axis=tuple(a for a in range(self.layout.n_qubits)
                                         if a != site))[1])


def _counting_probabilities(rho: np.ndarray, layout: DeviceLayout,
                            readout_order: Sequence[int]) -> np.ndarray:
    dims = (2,) * layout.n_qubits
    diag = np.real(np.diag(rho)).reshape(dims)
    other = tuple(a for a in range(layout.n_qubits) if a not in readout_order)
    marg = diag.sum(axis=other) if other else diag
    kept = [a for a in range(layout.n_qubits) if a not in other]
    perm = [kept.index(q) for q in readout_order]
    marg = np.transpose(marg, perm).reshape(-1)
    marg = np.clip(marg, 0.0, None)
    return marg / marg.sum()


def expected_bitstring(phi_true: float, n: int) -> str:
    """The scored outcome: round(phi * 2^n) mod 2^n, most significant first."""
    return format(round(phi_true * (2 ** n)) % (2 ** n), f"0{n}b")


# ---------------------------------------------------------------------------
# public protocol operations


def nonlocal_controlled_u(rho: DensityOperator, control: int, target: int,
                          u: np.ndarray, layout: DeviceLayout, *,
                          e2_mode: str = "ideal", hybrid_params: HybridParams | None = None,
                          provider=None, rng=None, deferred: bool = False,
                          forced_outcomes=None, apply_corrections: bool = True,
                          include_e2: bool = True,
                          ) -> tuple[DensityOperator, list[ProtocolStep]]:
    """Execute one teleported controlled-U (with its fresh E2) on a state.

    Returns the transformed state and the protocol transcript.  With
    ``deferred`` the mid-circuit measurements become coherent
    corrections (deterministic channel); otherwise outcomes are sampled
    from ``rng`` unless forced.  ``include_e2=False`` skips the pair
    generation, which is a protocol error the executor reports.
    """
    plan = _nonlocal_ops(control, target, u, layout, tag="nl")
    if not include_e2:
        plan = plan[1:]
    block = _e2_block(e2_mode, hybrid_params)
    refs = _reference_states(plan, layout, block) if include_e2 else {}
    channels = (provider or IdealGateProvider()).realize(plan, refs)
    ex = _Executor(layout, channels, block,
                   rng=rng or np.random.default_rng(0), deferred=deferred,
                   forced_outcomes=forced_outcomes, apply_corrections=apply_corrections)
    out = ex.run(rho.matrix, plan)
    return DensityOperator(rho.space, out), ex.transcript


def local_controlled_u_choi(u: np.ndarray) -> np.ndarray:
    """Choi matrix of the ideal local controlled-U on (control, target)."""
    from .lindblad import choi_matrix
    cu = controlled(u)
    return choi_matrix(unitary_superoperator(cu), 4)


def nonlocal_controlled_u_choi(u: np.ndarray, e2_mode: str = "ideal",
                               hybrid_params: HybridParams | None = None) -> np.ndarray:
    """Choi matrix of the induced (control, target) channel.

    Uses a minimal 4-qubit layout (control, target, two comm qubits)
    and the deterministic deferred-measurement execution, feeding the
    d^2 operator-basis inputs through the full protocol by linearity.
    """
    layout = DeviceLayout(flux_qubits=(1, 3), rydberg_qubits=(2, 0),
                          counting_order=(0,), flux_counting=None)
    # control = qubit 0 (rydberg side), target = qubit 1 (flux side)
    plan = _nonlocal_ops(0, 1, u, layout, tag="choi")
    block = _e2_block(e2_mode, hybrid_params)
    comm0 = np.zeros((4, 4), dtype=complex)
    comm0[0, 0] = 1.0
    j = np.zeros((16, 16), dtype=complex)
    basis = np.zeros((4, 4), dtype=complex)
    for a in range(4):
        for b in range(4):
            basis[a, b] = 1.0
            full = np.kron(basis, comm0)        # qubits (0,1) data, (2,3) comm
            ex = _Executor(layout, IdealGateProvider().realize(plan, {}), block,
                           deferred=True)
            out = ex.run(full.copy(), plan)
            red = partial_trace_array(out, (2, 2, 2, 2), keep=(0, 1))
            j += np.kron(basis, red)
            basis[a, b] = 0.0
    return j


def distributed_inverse_qft(rho: DensityOperator, layout: DeviceLayout, *,
                            provider=None, e2_mode: str = "ideal",
                            hybrid_params: HybridParams | None = None,
                            rng=None, deferred: bool = False,
                            physical_reversal: bool = False,
                            ) -> tuple[DensityOperator, list[int]]:
    """Apply the distributed inverse QFT over the counting register.

    Returns the transformed state and the readout order of the counting
    bits (see :func:`inverse_qft_ops`).
    """
    plan, readout = inverse_qft_ops(layout.counting_order, layout,
                                    physical_reversal=physical_reversal)
    block = _e2_block(e2_mode, hybrid_params)
    channels = (provider or IdealGateProvider()).realize(
        plan, _reference_states(plan, layout, block))
    ex = _Executor(layout, channels, block, rng=rng or np.random.default_rng(0),
                   deferred=deferred)
    out = ex.run(rho.matrix, plan)
    return DensityOperator(rho.space, out), readout


def _reference_states(plan: Sequence, layout: DeviceLayout, e2_block: np.ndarray,
                      rho0: np.ndarray | None = None) -> dict:
    """Reduced reference state before each synthesizable gate.

    Runs the plan once with ideal gates in deferred mode; the reduced
    state on a gate's sites is what the synthesized pulse is scored
    against (see grape.referenced_gate_target).
    """
    ex = _Executor(layout, {}, e2_block, deferred=True)
    rho = ex.initial_state() if rho0 is None else rho0.copy()
    refs = {}
    dims = (2,) * layout.n_qubits
    for i, op in enumerate(plan):
        if isinstance(op, GateInstance) and op.synthesize:
            ref = partial_trace_array(rho, dims, keep=sorted(op.sites))
            if len(op.sites) == 2 and op.sites[0] > op.sites[1]:
                ref = SWAP @ ref @ SWAP     # reduced state in the gate's site order
            refs[i] = ref
        rho = ex._apply(rho, i, op)
    return refs


@dataclass(frozen=True)
class QpeRun:
    """Everything run_qpe produces: shots, accuracy, transcript of shot 0."""

    records: list[ShotRecord]
    accuracy: float
    expected: str
    transcript: list[ProtocolStep]


def run_qpe(phi_true: float, layout: DeviceLayout, noise: str = "off",
            grape_config: SynthesisSettings | None = None, shots: int = 10,
            seed: int = 0, *, e2_mode: str = "ideal",
            hybrid_params: HybridParams | None = None,
            flux_params: FluxParams | None = None,
            rydberg_params: RydbergParams | None = None,
            physical_reversal: bool = False) -> QpeRun:
    """Distributed QPE: Hadamards, controlled-U ladder, inverse QFT, readout.

    With ``noise='on'`` every computational gate is GRAPE-synthesized on
    its device's noise model (built once, shared across shots);
    mid-circuit ebit measurements are sampled per shot with seeded,
    shot-indexed generators, so the outcome multiset is independent of
    execution order.  Accuracy is the fraction of shots whose counting
    bits equal round(phi * 2^n).
    """
    if shots < 1:
        raise ValueError("shots must be at least 1")
    if not 0.0 <= phi_true < 1.0:
        raise ValueError(f"phi_true must lie in [0, 1), got {phi_true}")
    plan, readout = build_qpe_plan(phi_true, layout, physical_reversal=physical_reversal)
    block = _e2_block(e2_mode, hybrid_params)
    if noise == "on":
        provider = GrapeGateProvider(flux_params or FluxParams(),
                                     rydberg_params or RydbergParams(),
                                     grape_config or SynthesisSettings())
    elif noise == "off":
        provider = IdealGateProvider()
    else:
        raise ValueError("noise must be 'on' or 'off'")
    refs = _reference_states(plan, layout, block)
    channels = provider.realize(plan, refs)

    n = layout.n_counting
    expected = expected_bitstring(phi_true, n)
    records = []
    transcript0: list[ProtocolStep] = []
    for shot in range(shots):
        rng = np.random.default_rng([seed, shot])
        ex = _Executor(layout, channels, block, rng=rng)
        rho = ex.run(ex.initial_state(), plan)
        probs = _counting_probabilities(rho, layout, readout)
        outcome_index = int(rng.choice(len(probs), p=probs))
        bits = format(outcome_index, f"0{n}b")
        records.append(ShotRecord(outcome=bits,
                                  phase_estimate=outcome_index / (2 ** n),
                                  correct=bits == expected))
        if shot == 0:
            transcript0 = ex.transcript
    accuracy = sum(r.correct for r in records) / shots
    return QpeRun(records=records, accuracy=accuracy, expected=expected,
                  transcript=transcript0)


def qpe_distribution(phi_true: float, layout: DeviceLayout, *,
                     noise: str = "off", grape_config: SynthesisSettings | None = None,
                     e2_mode: str = "ideal", hybrid_params: HybridParams | None = None,
                     flux_params: FluxParams | None = None,
                     rydberg_params: RydbergParams | None = None) -> np.ndarray:
    """Deterministic counting-register distribution (deferred measurements)."""
    plan, readout = build_qpe_plan(phi_true, layout)
    block = _e2_block(e2_mode, hybrid_params)
    if noise == "on":
        provider = GrapeGateProvider(flux_params or FluxParams(),
                                     rydberg_params or RydbergParams(),
                                     grape_config or SynthesisSettings())
    else:
        provider = IdealGateProvider()
    refs = _reference_states(plan, layout, block)
    channels = provider.realize(plan, refs)
    ex = _Executor(layout, channels, block, deferred=True)
    rho = ex.run(ex.initial_state(), plan)
    return _counting_probabilities(rho, layout, readout)
