"""Dense complex linear algebra for composite quantum systems.

This module carries the state/operator types used everywhere else:
Hilbert spaces with a fixed tensor-product decomposition, state vectors,
operators, density operators and superoperators, plus the tensor
plumbing (Kronecker products, embeddings, partial traces) and the
vectorization bridge between operators and superoperators.

Conventions
-----------
* Subsystem order is fixed at construction and shared by every object
  built on a space.  The first entry of ``subsystem_dims`` is the
  leftmost Kronecker factor.
* Vectorization is column-stacking throughout: ``vec(rho)`` stacks the
  columns of ``rho``, so ``vec(A rho B) = (B^T (x) A) vec(rho)``.
  Row-stacking is deliberately not supported.
* Everything is dense.  The largest space used by this package
  (a handful of qubits plus a small Fock mode) is far below the point
  where sparsity would pay off.

Validation tolerances are module-level constants; tests may adjust them
through :func:`set_tolerance` (there is intentionally no per-call knob).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "HilbertSpace",
    "StateVector",
    "Operator",
    "DensityOperator",
    "SuperOperator",
    "set_tolerance",
    "get_tolerance",
    "tensor_product",
    "embed",
    "partial_trace",
    "overlap_fidelity",
    "vec",
    "unvec",
    "vectorize",
    "devectorize",
    "dag",
    "ket",
    "qubit_space",
    "apply_local_unitary",
    "apply_local_superop",
    "replace_subsystems",
    "partial_trace_array",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "IDENTITY_2",
]


# Pauli matrices and the single-qubit identity, used as building blocks
# by every model in the package.
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)


_TOLERANCES = {
    "hermitian": 1e-10,     # max |M - M^dag| for Hermitian checks
    "trace": 1e-8,          # |Tr(rho) - 1|
    "positivity": 1e-8,     # -min eigenvalue allowed for density operators
    "state_norm": 1e-10,    # | ||psi|| - 1 | after normalization
}


def set_tolerance(name: str, value: float) -> None:
    """Test-configuration hook for the validation tolerances."""
    if name not in _TOLERANCES:
        raise KeyError(f"unknown tolerance {name!r}")
    _TOLERANCES[name] = float(value)


def get_tolerance(name: str) -> float:
    return _TOLERANCES[name]


class DimensionError(ValueError):
    """Structural mismatch between an object and the space it lives on."""


def dag(m: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return m.conj().T


@dataclass(frozen=True)
class HilbertSpace:
    """A composite Hilbert space with a fixed subsystem decomposition.

    ``subsystem_dims`` lists each factor's dimension in tensor order
    (qubits are 2, a truncated resonator is its Fock cutoff).
    """

    subsystem_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.subsystem_dims)
        if not dims:
            raise DimensionError("a Hilbert space needs at least one subsystem")
        for i, d in enumerate(dims):
            if d < 2:
                raise DimensionError(f"subsystem {i} has dimension {d} < 2")
        object.__setattr__(self, "subsystem_dims", dims)

    @property
    def total_dim(self) -> int:
        return math.prod(self.subsystem_dims)

    @property
    def n_subsystems(self) -> int:
        return len(self.subsystem_dims)

    def __mul__(self, other: "HilbertSpace") -> "HilbertSpace":
        return HilbertSpace(self.subsystem_dims + other.subsystem_dims)


def qubit_space(n: int) -> HilbertSpace:
    """Space of ``n`` qubits."""
    return HilbertSpace((2,) * n)


def _check_square(matrix: np.ndarray, dim: int, what: str) -> np.ndarray:
    m = np.asarray(matrix, dtype=complex)
    if m.shape != (dim, dim):
        raise DimensionError(f"{what} has shape {m.shape}, expected ({dim}, {dim})")
    return m


@dataclass(frozen=True)
class StateVector:
    """A normalized pure state on a space.

    Amplitudes are renormalized on construction; a zero vector is
    rejected.
    """

    space: HilbertSpace
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.shape[0] != self.space.total_dim:
            raise DimensionError(
                f"state has {amps.shape[0]} amplitudes on a dim-{self.space.total_dim} space"
            )
        norm = np.linalg.norm(amps)
        if norm == 0.0:
            raise ValueError("cannot normalize the zero vector")
        object.__setattr__(self, "amplitudes", amps / norm)

    def to_density(self) -> "DensityOperator":
        return DensityOperator(self.space, np.outer(self.amplitudes, self.amplitudes.conj()))


def ket(space: HilbertSpace, index: int | Sequence[int]) -> StateVector:
    """Computational basis state, by flat index or per-subsystem labels."""
    if not isinstance(index, int):
        labels = list(index)
        if len(labels) != space.n_subsystems:
            raise DimensionError("one label per subsystem required")
        flat = 0
        for label, d in zip(labels, space.subsystem_dims):
            if not 0 <= label < d:
                raise ValueError(f"label {label} out of range for dimension {d}")
            flat = flat * d + label
        index = flat
    amps = np.zeros(space.total_dim, dtype=complex)
    amps[index] = 1.0
    return StateVector(space, amps)


@dataclass(frozen=True)
class Operator:
    """A linear operator on a space, optionally flagged Hermitian.

    With ``hermitian_hint`` set, the matrix is checked against the
    ``hermitian`` tolerance at construction.
    """

    space: HilbertSpace
    matrix: np.ndarray
    hermitian_hint: bool = False

    def __post_init__(self):
        m = _check_square(self.matrix, self.space.total_dim, "operator matrix")
        if self.hermitian_hint:
            defect = np.max(np.abs(m - dag(m)))
            if defect > _TOLERANCES["hermitian"]:
                raise ValueError(f"hermitian_hint set but max|M - M^dag| = {defect:.3e}")
        object.__setattr__(self, "matrix", m)

    def dagger(self) -> "Operator":
        return Operator(self.space, dag(self.matrix), self.hermitian_hint)

    @classmethod
    def identity(cls, space: HilbertSpace) -> "Operator":
        return cls(space, np.eye(space.total_dim, dtype=complex), hermitian_hint=True)


@dataclass(frozen=True)
class DensityOperator:
    """Hermitian, trace-one, positive-semidefinite state carrier.

    Invariants checked at construction (module tolerances): Hermiticity,
    unit trace and smallest eigenvalue above ``-positivity``.
    """

    space: HilbertSpace
    matrix: np.ndarray

    def __post_init__(self):
        m = _check_square(self.matrix, self.space.total_dim, "density matrix")
        herm = np.max(np.abs(m - dag(m)))
        if herm > _TOLERANCES["hermitian"]:
            raise ValueError(f"density matrix not Hermitian: max|M - M^dag| = {herm:.3e}")
        tr = m.trace()
        if abs(tr - 1.0) > _TOLERANCES["trace"]:
            raise ValueError(f"density matrix trace {tr:.12g} != 1")
        lo = float(np.linalg.eigvalsh((m + dag(m)) / 2.0)[0])
        if lo < -_TOLERANCES["positivity"]:
            raise ValueError(f"density matrix has eigenvalue {lo:.3e} < 0")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def pure(cls, state: StateVector) -> "DensityOperator":
        return state.to_density()

    @classmethod
    def maximally_mixed(cls, space: HilbertSpace) -> "DensityOperator":
        d = space.total_dim
        return cls(space, np.eye(d, dtype=complex) / d)


@dataclass(frozen=True)
class SuperOperator:
    """A linear map on vectorized density operators (column-stacking)."""

    space: HilbertSpace
    matrix: np.ndarray

    def __post_init__(self):
        d2 = self.space.total_dim ** 2
        object.__setattr__(self, "matrix", _check_square(self.matrix, d2, "superoperator matrix"))

    @classmethod
    def identity(cls, space: HilbertSpace) -> "SuperOperator":
        return cls(space, np.eye(space.total_dim ** 2, dtype=complex))

    def __call__(self, rho: DensityOperator) -> np.ndarray:
        """Apply to a density operator; returns the raw output matrix."""
        if rho.space != self.space:
            raise DimensionError("state and superoperator live on different spaces")
        return unvec(self.matrix @ vec(rho.matrix))


# ---------------------------------------------------------------------------
# vectorization


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization of a square matrix."""
    m = np.asarray(matrix)
    return m.reshape(m.shape[0] * m.shape[1], order="F").astype(complex, copy=False)


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`vec`; infers the dimension when not given."""
    v = np.asarray(v).reshape(-1)
    if dim is None:
        dim = math.isqrt(v.shape[0])
        if dim * dim != v.shape[0]:
            raise DimensionError(f"vector length {v.shape[0]} is not a perfect square")
    return v.reshape((dim, dim), order="F")


def vectorize(rho: DensityOperator) -> np.ndarray:
    """``vec`` of a density operator; satisfies ||vec(rho)||_2 = ||rho||_F."""
    return vec(rho.matrix)


def devectorize(v: np.ndarray, space: HilbertSpace | None = None) -> DensityOperator:
    """Rebuild a density operator from its column-stacked vector.

    Without an explicit space, a single-subsystem space of the inferred
    dimension is assumed; the length must be a perfect square.
    """
    v = np.asarray(v).reshape(-1)
    if space is None:
        dim = math.isqrt(v.shape[0])
        if dim * dim != v.shape[0]:
            raise DimensionError(f"vector length {v.shape[0]} is not a perfect square")
        space = HilbertSpace((dim,))
    elif space.total_dim ** 2 != v.shape[0]:
        raise DimensionError(
            f"vector length {v.shape[0]} does not match space dimension {space.total_dim}"
        )
    return DensityOperator(space, unvec(v, space.total_dim))


# ---------------------------------------------------------------------------
# tensor plumbing


def tensor_product(ops: Sequence[Operator]) -> Operator:
    """Kronecker product of operators, in the given (fixed) order.

    The result lives on the concatenation of the operand spaces.
    """
    ops = list(ops)
    if not ops:
        raise DimensionError("tensor_product needs at least one operand")
    for i, op in enumerate(ops):
        if op.matrix.shape != (op.space.total_dim, op.space.total_dim):
            raise DimensionError(f"operand {i} is inconsistent with its declared space")
    matrix = reduce(np.kron, (op.matrix for op in ops))
    space = HilbertSpace(tuple(d for op in ops for d in op.space.subsystem_dims))
    return Operator(space, matrix, hermitian_hint=all(op.hermitian_hint for op in ops))


def embed(op: Operator, site: int, space: HilbertSpace) -> Operator:
    """Place a single-subsystem operator at ``site``, identity elsewhere."""
    if not 0 <= site < space.n_subsystems:
        raise DimensionError(f"site {site} out of range for {space.n_subsystems} subsystems")
    d_site = space.subsystem_dims[site]
    if op.matrix.shape != (d_site, d_site):
        raise DimensionError(
            f"operator of dimension {op.matrix.shape[0]} cannot sit on subsystem "
            f"{site} of dimension {d_site}"
        )
    left = math.prod(space.subsystem_dims[:site])
    right = math.prod(space.subsystem_dims[site + 1:])
    matrix = np.kron(np.kron(np.eye(left), op.matrix), np.eye(right))
    return Operator(space, matrix, hermitian_hint=op.hermitian_hint)


def partial_trace_array(arr: np.ndarray, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Array-level partial trace keeping ``keep`` (ascending order)."""
    dims = tuple(dims)
    n = len(dims)
    keep = sorted(set(keep))
    if not keep:
        raise DimensionError("keep set must be nonempty")
    if keep[0] < 0 or keep[-1] >= n:
        raise DimensionError(f"keep indices {keep} out of range for {n} subsystems")
    traced = [i for i in range(n) if i not in keep]
    t = arr.reshape(dims + dims)
    # contract each traced subsystem's row index with its column index
    for offset, i in enumerate(traced):
        axis = i - sum(1 for j in traced[:offset] if j < i)
        ncur = t.ndim // 2
        t = np.trace(t, axis1=axis, axis2=axis + ncur)
    d_keep = math.prod(dims[i] for i in keep)
    return t.reshape(d_keep, d_keep)


def partial_trace(rho: DensityOperator, keep: Iterable[int]) -> DensityOperator:
    """Reduced density operator on the kept subsystems (ascending order)."""
    keep = sorted(set(keep))
    reduced = partial_trace_array(rho.matrix, rho.space.subsystem_dims, keep)
    space = HilbertSpace(tuple(rho.space.subsystem_dims[i] for i in keep))
    return DensityOperator(space, reduced)


def overlap_fidelity(rho: DensityOperator, target: Operator) -> float:
    """Re Tr(C^dag rho); for a pure-state projector C this is a population."""
    if rho.space.total_dim != target.space.total_dim:
        raise DimensionError("state and target live on different spaces")
    return float(np.real(np.trace(dag(target.matrix) @ rho.matrix)))


# ---------------------------------------------------------------------------
# local application of gates / channels inside a register
#
# These helpers act on raw matrices (the protocol layer drives them hard
# and validates at its own boundaries).


def _grouped(arr: np.ndarray, dims: Sequence[int], sites: Sequence[int]):
    """Reshape ``arr`` so the ``sites`` subsystems sit in one leading block.

    Returns ``(tensor, inverse_permutation, d_loc, d_env)`` where tensor
    has shape (d_loc, d_env, d_loc, d_env).
    """
    dims = tuple(dims)
    n = len(dims)
    sites = list(sites)
    rest = [i for i in range(n) if i not in sites]
    perm = sites + rest
    d_loc = math.prod(dims[i] for i in sites)
    d_env = math.prod(dims[i] for i in rest)
    t = arr.reshape(dims + dims)
    t = t.transpose([*perm, *[n + p for p in perm]])
    t = t.reshape(d_loc, d_env, d_loc, d_env)
    inv = np.argsort(perm)
    return t, (perm, inv, dims), d_loc, d_env


def _ungroup(t: np.ndarray, meta, d_total: int) -> np.ndarray:
    perm, inv, dims = meta
    n = len(dims)
    shape = tuple(dims[p] for p in perm)
    t = t.reshape(shape + shape)
    t = t.transpose([*inv, *[n + i for i in inv]])
    return t.reshape(d_total, d_total)


def apply_local_unitary(arr: np.ndarray, dims: Sequence[int], sites: Sequence[int],
                        u: np.ndarray) -> np.ndarray:
    """Conjugate ``arr`` by a unitary acting only on ``sites``."""
    d_total = arr.shape[0]
    t, meta, d_loc, _ = _grouped(arr, dims, sites)
    if u.shape != (d_loc, d_loc):
        raise DimensionError(f"gate of dimension {u.shape[0]} does not fit sites {list(sites)}")
    out = np.einsum("ab,becf,dc->aedf", u, t, u.conj(), optimize=True)
    return _ungroup(out, meta, d_total)


def apply_local_superop(arr: np.ndarray, dims: Sequence[int], sites: Sequence[int],
                        s: np.ndarray) -> np.ndarray:
    """Apply a (column-stacking) superoperator to the ``sites`` block."""
    d_total = arr.shape[0]
    t, meta, d_loc, d_env = _grouped(arr, dims, sites)
    if s.shape != (d_loc * d_loc, d_loc * d_loc):
        raise DimensionError("superoperator does not fit the targeted sites")
    # column-stacked local vec index is col*d_loc + row
    m = t.transpose(2, 0, 1, 3).reshape(d_loc * d_loc, d_env, d_env)
    m = np.einsum("ij,jef->ief", s, m, optimize=True)
    out = m.reshape(d_loc, d_loc, d_env, d_env).transpose(1, 2, 0, 3)
    return _ungroup(out, meta, d_total)


def replace_subsystems(arr: np.ndarray, dims: Sequence[int], sites: Sequence[int],
                       block: np.ndarray) -> np.ndarray:
    """Trace out ``sites`` and install ``block`` there instead.

    Implements the measure-and-reprepare channel used when fresh
    entangled pairs are injected into a register.
    """
    dims = tuple(dims)
    d_total = arr.shape[0]
    sites = list(sites)
    rest = [i for i in range(len(dims)) if i not in sites]
    env = partial_trace_array(arr, dims, rest)
    d_loc = math.prod(dims[i] for i in sites)
    if block.shape != (d_loc, d_loc):
        raise DimensionError("replacement block does not fit the targeted sites")
    t = np.einsum("ac,ef->aecf", block, env, optimize=True)
    meta = (sites + rest, np.argsort(sites + rest), dims)
    return _ungroup(t, meta, d_total)
