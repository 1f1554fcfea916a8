"""Hamiltonian and dissipator builders for the three hardware models.

Three parameter records and their builders:

* :class:`RydbergParams` -- a chain of two-level Rydberg atoms with a
  transverse drive, van-der-Waals blockade falling off as 1/R^6,
  per-site dephasing and spontaneous decay.
* :class:`FluxParams` -- a C-shunted flux qubit near degeneracy coupled
  to a CPW resonator mode, with flux (sigma_x), charge (sigma_y, scaling
  as zeta^(-3/4)) and frequency (sigma_z) noise channels plus a Purcell
  channel.
* :class:`HybridParams` -- the LC-resonator coupler joining one flux
  qubit and one three-level atom (levels e, g, u); this is the model
  behind the entangling (E2) primitive.

Units: hbar = 1, time in ns, angular frequencies in rad/ns.  Values
quoted as linear frequencies f (GHz) convert as omega = 2*pi*f.
Several magnitudes (drive strengths, fluctuation amplitudes, couplings)
are not fixed numerically by the source material; their defaults here
are calibrated values, marked as such, and everything is overridable
through the experiment config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lindblad import CollapseChannel
from .qcore import (
    IDENTITY_2,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    HilbertSpace,
    Operator,
    dag,
    embed,
    qubit_space,
)

__all__ = [
    "RydbergParams",
    "FluxParams",
    "HybridParams",
    "rydberg_hamiltonian",
    "rydberg_channels",
    "flux_two_level",
    "flux_hamiltonian",
    "flux_channels",
    "flux_register_hamiltonian",
    "flux_register_channels",
    "hybrid_space",
    "hybrid_terms",
    "hybrid_hamiltonian",
    "hybrid_channels",
    "flux_potential",
    "potential_cut",
    "GHZ_SCHEDULE_TIME",
]

TWO_PI = 2.0 * math.pi

# Charge-noise reference shunt factor: nz_ec_dn is quoted at zeta = 10
# and rescaled by (zeta/10)^(-3/4) elsewhere.
ZETA_REF = 10.0

# single-qubit raising/lowering/number operators in the {|g>=0, |e>=1} basis
SIGMA_EG = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)   # |e><g|
SIGMA_GE = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)   # |g><e|
SIGMA_EE = np.array([[0.0, 0.0], [0.0, 1.0]], dtype=complex)   # |e><e|


def _require_nonneg(**values: float) -> None:
    for name, v in values.items():
        if v < 0:
            raise ValueError(f"{name} must be nonnegative, got {v}")


@dataclass(frozen=True)
class RydbergParams:
    """Rydberg atom array parameters.

    v0 is the van-der-Waals coefficient C6 in rad/ns*um^6 (the default
    is 2*pi * 801.98 GHz*um^6); spacing is the interatomic distance in
    um.  gamma_decay defaults to 1/375000 ns^-1, the inverse of the
    375 us spontaneous-decay time of the Rydberg level.
    """

    n_atoms: int = 1
    omega: float = 0.0
    v0: float = TWO_PI * 801.98
    spacing: float = 3.5
    gamma_dephase: float = 1e-5           # calibrated, not a source value
    gamma_decay: float = 1.0 / 375_000.0
    detuning: float = 0.0

    def __post_init__(self):
        if self.n_atoms < 1:
            raise ValueError("n_atoms must be at least 1")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        _require_nonneg(gamma_dephase=self.gamma_dephase, gamma_decay=self.gamma_decay)


def rydberg_hamiltonian(p: RydbergParams) -> Operator:
    """Drive + blockade + detuning on ``n_atoms`` qubits.

    H = (omega/2) sum_i (sigma_eg + sigma_ge)^(i)
        + v0 sum_{i<j} n_i n_j / (|i-j| spacing)^6
        - detuning sum_i n_i
    """
    space = qubit_space(p.n_atoms)
    d = space.total_dim
    h = np.zeros((d, d), dtype=complex)
    for i in range(p.n_atoms):
        h += 0.5 * p.omega * embed(Operator(qubit_space(1), SIGMA_EG + SIGMA_GE), i, space).matrix
        h -= p.detuning * embed(Operator(qubit_space(1), SIGMA_EE), i, space).matrix
    for i in range(p.n_atoms):
        for j in range(i + 1, p.n_atoms):
            r = abs(i - j) * p.spacing
            ni = embed(Operator(qubit_space(1), SIGMA_EE), i, space).matrix
            nj = embed(Operator(qubit_space(1), SIGMA_EE), j, space).matrix
            h += (p.v0 / r**6) * (ni @ nj)
    return Operator(space, h, hermitian_hint=True)


def rydberg_channels(p: RydbergParams) -> list[CollapseChannel]:
    """Per-site dephasing (projector on |e>) and decay (|g><e|) channels."""
    space = qubit_space(p.n_atoms)
    channels = []
    for i in range(p.n_atoms):
        if p.gamma_dephase > 0:
            channels.append(CollapseChannel(
                embed(Operator(qubit_space(1), SIGMA_EE), i, space), p.gamma_dephase))
        if p.gamma_decay > 0:
            channels.append(CollapseChannel(
                embed(Operator(qubit_space(1), SIGMA_GE), i, space), p.gamma_decay))
    return channels


@dataclass(frozen=True)
class FluxParams:
    """C-shunted flux qubit + CPW resonator parameters.

    epsilon/delta are the two-level bias and tunnel splitting (rad/ns);
    the sigma_z channel rate is sqrt(epsilon^2 + delta^2)/2.  The charge
    -noise magnitude nz_ec_dn is quoted at zeta = 10 and rescales as
    (zeta/10)^(-3/4).  purcell_rate defaults to 2*pi * 9.19 MHz.
    j_zz is the static qubit-qubit coupling used when a register of
    more than one flux qubit is assembled (mediated by the shared CPW;
    magnitude calibrated, not a source value).
    """

    epsilon: float = 1e-4                 # calibrated
    delta: float = 2e-4                   # calibrated
    omega_r: float = TWO_PI * 5.0
    g: float = TWO_PI * 0.1
    alpha: float = 0.8
    f_eps: float = 0.53
    zeta: float = 10.0
    im_phi0_df: float = 2e-4              # calibrated
    nz_ec_dn: float = 4e-2                # calibrated, quoted at zeta = 10
    purcell_rate: float = TWO_PI * 9.19e-3
    fock_dim: int = 3
    j_zz: float = TWO_PI * 0.025          # calibrated

    def __post_init__(self):
        if self.zeta < 1:
            raise ValueError("zeta must be at least 1")
        if self.fock_dim < 2:
            raise ValueError("fock_dim must be at least 2")
        if not 0 < self.f_eps < 1:
            raise ValueError("f_eps must lie strictly between 0 and 1")
        _require_nonneg(im_phi0_df=self.im_phi0_df, nz_ec_dn=self.nz_ec_dn,
                        purcell_rate=self.purcell_rate)

    @property
    def omega_q(self) -> float:
        """Two-level splitting sqrt(epsilon^2 + delta^2)."""
        return math.hypot(self.epsilon, self.delta)

    @property
    def charge_rate(self) -> float:
        """sigma_y charge-noise rate after the zeta^(-3/4) rescaling."""
        return 0.5 * self.nz_ec_dn * (self.zeta / ZETA_REF) ** -0.75


def _fock_ops(n: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.diag(np.sqrt(np.arange(1, n, dtype=float)), k=1).astype(complex)
    return a, dag(a)


def flux_two_level(p: FluxParams) -> Operator:
    """Two-level flux Hamiltonian (epsilon sigma_z + delta sigma_x)/2."""
    return Operator(qubit_space(1),
                    0.5 * (p.epsilon * SIGMA_Z + p.delta * SIGMA_X),
                    hermitian_hint=True)


def flux_hamiltonian(p: FluxParams) -> Operator:
    """Qubit + resonator + sigma_y coupling on qubit (x) Fock(fock_dim).

    H = (epsilon sigma_z + delta sigma_x)/2 (x) I
        + I (x) omega_r (a^dag a + 1/2)
        + g sigma_y (x) (a^dag + a)
    """
    space = HilbertSpace((2, p.fock_dim))
    a, adg = _fock_ops(p.fock_dim)
    ident_f = np.eye(p.fock_dim, dtype=complex)
    h = (np.kron(flux_two_level(p).matrix, ident_f)
         + np.kron(IDENTITY_2, p.omega_r * (adg @ a + 0.5 * ident_f))
         + p.g * np.kron(SIGMA_Y, adg + a))
    return Operator(space, h, hermitian_hint=True)


def _flux_qubit_channels(p: FluxParams) -> list[tuple[np.ndarray, float]]:
    out = []
    if p.omega_q > 0:
        out.append((SIGMA_Z, 0.5 * p.omega_q))
    if p.im_phi0_df > 0:
        out.append((SIGMA_X, 0.5 * p.im_phi0_df))
    if p.charge_rate > 0:
        out.append((SIGMA_Y, p.charge_rate))
    if p.purcell_rate > 0:
        out.append((SIGMA_Y, p.purcell_rate))
    return out


def flux_channels(p: FluxParams) -> list[CollapseChannel]:
    """Flux / charge / frequency / Purcell channels on qubit (x) Fock.

    All four act on the qubit factor (the mode coupled to the CPW);
    zero-rate channels are dropped, so a fully quiet parameter set
    yields an empty list.
    """
    space = HilbertSpace((2, p.fock_dim))
    return [CollapseChannel(embed(Operator(qubit_space(1), m), 0, space), rate)
            for m, rate in _flux_qubit_channels(p)]


def flux_register_hamiltonian(p: FluxParams, n_qubits: int) -> Operator:
    """Drift for a register of two-level flux qubits (no resonator).

    Each qubit carries the two-level term; pairs are coupled by the
    static j_zz sigma_z sigma_z interaction mediated by the shared CPW.
    This is the drift used for gate synthesis on the flux device.
    """
    if n_qubits < 1:
        raise ValueError("n_qubits must be at least 1")
    space = qubit_space(n_qubits)
    d = space.total_dim
    h = np.zeros((d, d), dtype=complex)
    for i in range(n_qubits):
        h += embed(flux_two_level(p), i, space).matrix
    for i in range(n_qubits):
        for j in range(i + 1, n_qubits):
            zi = embed(Operator(qubit_space(1), SIGMA_Z), i, space).matrix
            zj = embed(Operator(qubit_space(1), SIGMA_Z), j, space).matrix
            h += p.j_zz * (zi @ zj)
    return Operator(space, h, hermitian_hint=True)


def flux_register_channels(p: FluxParams, n_qubits: int) -> list[CollapseChannel]:
    """Per-qubit flux noise channels on a resonatorless register."""
    space = qubit_space(n_qubits)
    channels = []
    for i in range(n_qubits):
        for m, rate in _flux_qubit_channels(p):
            channels.append(CollapseChannel(embed(Operator(qubit_space(1), m), i, space), rate))
    return channels


# Calibrated entangling-schedule constants: the resonator is detuned by
# GHZ_BUS_DETUNING above the flux splitting (dispersive bus, low photon
# occupancy) and the atomic transition sits GHZ_TWO_PHOTON above the
# flux splitting, capping the exchange so the Bell overlap peaks near
# 0.93 around 16 ns.
GHZ_BUS_DETUNING = 7.5 * 0.349
GHZ_TWO_PHOTON = 0.163


@dataclass(frozen=True)
class HybridParams:
    """LC-resonator coupler between one flux qubit and one 3-level atom.

    omega0 is the LC frequency (default 2*pi * 20 GHz) and the resonator
    loss rate is kappa = omega0/q_factor.  omega_mu holds the atomic
    level energies (e, g, u); rabi the two drive amplitudes (Omega,
    Omega').  Coupling magnitudes and detunings are not fixed by the
    source material; the defaults are the calibrated entangling
    schedule (see protocol.bell_pair_from_hybrid).
    """

    omega0: float = TWO_PI * 20.0
    omega_mu: tuple[float, float, float] | None = None   # (e, g, u); default from delta_f
    rabi: tuple[float, float] = (0.0, 0.0)
    g_a: float = 2 * 0.349                               # calibrated
    g_a_prime: float = 0.0
    g_f: float = 0.349                                   # calibrated
    eps_f: float = 0.0
    delta_f: float = TWO_PI * 20.0 - GHZ_BUS_DETUNING    # calibrated
    q_factor: float = 1e5
    gamma_relax: float = 1e-6
    gamma_phi: float = 1e-6
    gamma_e_hybrid: float = 1e-6
    fock_dim: int = 3

    def __post_init__(self):
        if self.q_factor <= 0:
            raise ValueError("q_factor must be positive")
        if self.fock_dim < 2:
            raise ValueError("fock_dim must be at least 2")
        _require_nonneg(gamma_relax=self.gamma_relax, gamma_phi=self.gamma_phi,
                        gamma_e_hybrid=self.gamma_e_hybrid)
        if self.omega_mu is None:
            object.__setattr__(
                self, "omega_mu",
                (self.delta_f + GHZ_TWO_PHOTON, 0.0, self.delta_f + TWO_PI * 3.0))

    @property
    def kappa(self) -> float:
        """Resonator loss rate omega0/Q."""
        if math.isinf(self.q_factor):
            return 0.0
        return self.omega0 / self.q_factor


# atom basis order within the hybrid space: |e> = 0, |g> = 1, |u> = 2
ATOM_E, ATOM_G, ATOM_U = 0, 1, 2


def _atom_op(bra_level: int, ket_level: int) -> np.ndarray:
    m = np.zeros((3, 3), dtype=complex)
    m[bra_level, ket_level] = 1.0
    return m


def hybrid_space(p: HybridParams) -> HilbertSpace:
    """flux qubit (x) LC mode (x) atom(e, g, u)."""
    return HilbertSpace((2, p.fock_dim, 3))


def hybrid_terms(p: HybridParams) -> dict[str, Operator]:
    """The five summands of the coupler Hamiltonian, individually.

    Keys: 'lc', 'atom', 'flux', 'v_atom', 'v_flux'.  The full
    Hamiltonian is their sum (tested as an invariant).
    """
    space = hybrid_space(p)
    nf = p.fock_dim
    a, adg = _fock_ops(nf)
    ident_q = IDENTITY_2
    ident_r = np.eye(nf, dtype=complex)
    ident_a = np.eye(3, dtype=complex)

    def lift(q, r, at):
        return np.kron(np.kron(q, r), at)

    omega_e, omega_g, omega_u = p.omega_mu
    h_lc = lift(ident_q, p.omega0 * (adg @ a + 0.5 * ident_r), ident_a)

    h_atom_local = (omega_e * _atom_op(ATOM_E, ATOM_E)
                    + omega_g * _atom_op(ATOM_G, ATOM_G)
                    + omega_u * _atom_op(ATOM_U, ATOM_U)
                    + 0.5 * p.rabi[0] * (_atom_op(ATOM_E, ATOM_G) + _atom_op(ATOM_G, ATOM_E))
                    + 0.5 * p.rabi[1] * (_atom_op(ATOM_E, ATOM_U) + _atom_op(ATOM_U, ATOM_E)))
    h_atom = lift(ident_q, ident_r, h_atom_local)

    h_flux = lift(-0.5 * p.eps_f * SIGMA_Z - 0.5 * p.delta_f * SIGMA_X, ident_r, ident_a)

    v_atom = (0.5 * p.g_a * (lift(ident_q, adg, _atom_op(ATOM_G, ATOM_E))
                             + lift(ident_q, a, _atom_op(ATOM_E, ATOM_G)))
              + 0.5 * p.g_a_prime * (lift(ident_q, adg, _atom_op(ATOM_U, ATOM_E))
                                     + lift(ident_q, a, _atom_op(ATOM_E, ATOM_U))))

    v_flux = -p.g_f * lift(SIGMA_Z, adg + a, ident_a)

    return {
        "lc": Operator(space, h_lc, hermitian_hint=True),
        "atom": Operator(space, h_atom, hermitian_hint=True),
        "flux": Operator(space, h_flux, hermitian_hint=True),
        "v_atom": Operator(space, v_atom, hermitian_hint=True),
        "v_flux": Operator(space, v_flux, hermitian_hint=True),
    }


def hybrid_hamiltonian(p: HybridParams) -> Operator:
    """Full coupler Hamiltonian: LC + atom + flux + both couplings."""
    terms = hybrid_terms(p)
    total = sum(t.matrix for t in terms.values())
    return Operator(hybrid_space(p), total, hermitian_hint=True)


def hybrid_channels(p: HybridParams) -> list[CollapseChannel]:
    """Coupler dissipation: flux relaxation/dephasing, photon loss, atomic decay.

    The atomic channels transfer population from e and u into the
    ground level g; the resonator channel carries kappa = omega0/Q and
    is dropped in the Q -> infinity limit.
    """
    space = hybrid_space(p)
    nf = p.fock_dim
    a, _ = _fock_ops(nf)
    ident_q = IDENTITY_2
    ident_r = np.eye(nf, dtype=complex)
    ident_a = np.eye(3, dtype=complex)

    def lift(q, r, at):
        return np.kron(np.kron(q, r), at)

    sigma_f_minus = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)  # |R><L| in (L, R) basis
    channels = []
    if p.gamma_relax > 0:
        channels.append(CollapseChannel(
            Operator(space, lift(sigma_f_minus, ident_r, ident_a)), p.gamma_relax))
    if p.gamma_phi > 0:
        channels.append(CollapseChannel(
            Operator(space, lift(SIGMA_Z, ident_r, ident_a)), 0.5 * p.gamma_phi))
    if p.kappa > 0:
        channels.append(CollapseChannel(
            Operator(space, lift(ident_q, a, ident_a)), p.kappa))
    if p.gamma_e_hybrid > 0:
        for mu in (ATOM_E, ATOM_U):
            channels.append(CollapseChannel(
                Operator(space, lift(ident_q, ident_r, _atom_op(ATOM_G, mu))),
                p.gamma_e_hybrid))
    return channels


# Calibrated duration of the entangling schedule; the Bell fidelity
# peaks at this time (see protocol.bell_pair_from_hybrid).
GHZ_SCHEDULE_TIME = 15.9


# ---------------------------------------------------------------------------
# flux-qubit double-well potential (static circuit energetics)


def flux_potential(alpha: float, f_eps: float, phi1, phi2):
    """U/E_J of the 3-junction loop at junction phases (phi1, phi2).

    U/E_J = 2 + alpha - cos(phi1) - cos(phi2)
            - alpha cos(2 pi f_eps + phi1 - phi2)
    """
    phi1 = np.asarray(phi1, dtype=float)
    phi2 = np.asarray(phi2, dtype=float)
    return (2.0 + alpha - np.cos(phi1) - np.cos(phi2)
            - alpha * np.cos(TWO_PI * f_eps + phi1 - phi2))


def potential_cut(alpha: float, f_eps: float, phi_star):
    """1-D cut along phi1 = phi*, phi2 = -phi* (the double-well section)."""
    phi_star = np.asarray(phi_star, dtype=float)
    return flux_potential(alpha, f_eps, phi_star, -phi_star)
