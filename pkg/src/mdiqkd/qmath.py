"""Exact small-system quantum mechanics on dense state vectors.

Everything here works on at most four qubits, which covers the largest
configuration the simulator needs (probe, signal and purification ancilla).
Qubit 0 is the leftmost tensor factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ATOL = 1e-12
MAX_QUBITS = 4

_SQ2 = 1.0 / np.sqrt(2.0)


def _qubit_count(dim: int) -> int:
    n = int(dim).bit_length() - 1
    if dim < 2 or (1 << n) != dim:
        raise ValueError(f"dimension {dim} is not a power of two")
    return n


class PureState:
    """Normalized amplitude vector over 1 to 4 qubits.

    Instances are immutable.  Construction rejects vectors whose norm is off
    by more than 1e-9 unless ``normalize=True``; the stored vector is always
    rescaled to unit norm.
    """

    __slots__ = ("_amps",)

    def __init__(self, amplitudes, normalize: bool = False):
        a = np.array(amplitudes, dtype=complex).ravel()
        n = _qubit_count(a.size)
        if n > MAX_QUBITS:
            raise ValueError(f"{n} qubits exceeds the cap of {MAX_QUBITS}")
        norm = np.linalg.norm(a)
        if norm == 0.0:
            raise ValueError("zero vector is not a state")
        if not normalize and abs(norm**2 - 1.0) > 1e-9:
            raise ValueError(f"state is not normalized (squared norm {norm**2:.3g})")
        a = a / norm
        a.flags.writeable = False
        self._amps = a

    @property
    def amplitudes(self) -> np.ndarray:
        return self._amps

    @property
    def n_qubits(self) -> int:
        return _qubit_count(self._amps.size)

    @property
    def dim(self) -> int:
        return self._amps.size

    def inner(self, other: "PureState") -> complex:
        """Return <self|other>."""
        return complex(np.vdot(self._amps, other._amps))

    def equiv(self, other: "PureState", atol: float = 1e-9) -> bool:
        """True when the two states agree up to a global phase."""
        if self.dim != other.dim:
            return False
        return abs(abs(self.inner(other)) - 1.0) <= atol

    def __eq__(self, other):
        if not isinstance(other, PureState):
            return NotImplemented
        return self.dim == other.dim and np.allclose(self._amps, other._amps, atol=ATOL)

    def __hash__(self):
        return hash(self._amps.tobytes())

    def __repr__(self):
        return f"PureState({np.array2string(self._amps, precision=4)})"


class Unitary:
    """Square unitary matrix of dimension 2**n (n <= 4)."""

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("unitary must be a square matrix")
        if _qubit_count(m.shape[0]) > MAX_QUBITS:
            raise ValueError("unitary acts on too many qubits")
        if not np.allclose(m @ m.conj().T, np.eye(m.shape[0]), atol=ATOL, rtol=0):
            raise ValueError("matrix is not unitary within 1e-12")
        m.flags.writeable = False
        self._m = m

    @property
    def matrix(self) -> np.ndarray:
        return self._m

    @property
    def dim(self) -> int:
        return self._m.shape[0]

    def __matmul__(self, other: "Unitary") -> "Unitary":
        return Unitary(self._m @ other._m)

    def dagger(self) -> "Unitary":
        return Unitary(self._m.conj().T)

    def kron(self, other: "Unitary") -> "Unitary":
        return Unitary(np.kron(self._m, other._m))

    def __repr__(self):
        return f"Unitary({np.array2string(self._m, precision=4)})"


# -- standard single-qubit objects -------------------------------------------

I2 = Unitary(np.eye(2))
X = Unitary([[0, 1], [1, 0]])
Y = Unitary([[0, -1j], [1j, 0]])
Z = Unitary([[1, 0], [0, -1]])
H = Unitary(_SQ2 * np.array([[1, 1], [1, -1]]))

ZERO = PureState([1, 0])
ONE = PureState([0, 1])
PLUS = PureState([_SQ2, _SQ2])
MINUS = PureState([_SQ2, -_SQ2])
# eigenstates of Y, written |a> and |b>
A_STATE = PureState([_SQ2, 1j * _SQ2])
B_STATE = PureState([_SQ2, -1j * _SQ2])


def general_states(theta: float) -> tuple[PureState, PureState]:
    """Return (|x>, |y>) with x0 = cos(theta), x1 = sin(theta)."""
    x0, x1 = np.cos(theta), np.sin(theta)
    return PureState([x0, x1]), PureState([x1, -x0])


@dataclass(frozen=True)
class MeasurementBasis:
    """Orthonormal single-qubit basis; ``vectors[k]`` is outcome k."""

    label: str
    vectors: tuple[PureState, PureState]
    theta: float | None = None

    def __post_init__(self):
        v0, v1 = self.vectors
        if v0.dim != 2 or v1.dim != 2:
            raise ValueError("basis vectors must be single-qubit states")
        if abs(v0.inner(v1)) > ATOL:
            raise ValueError("basis vectors are not orthogonal")

    @classmethod
    def z(cls) -> "MeasurementBasis":
        return cls("Z", (ZERO, ONE))

    @classmethod
    def x(cls) -> "MeasurementBasis":
        return cls("X", (PLUS, MINUS))

    @classmethod
    def y(cls) -> "MeasurementBasis":
        return cls("Y", (A_STATE, B_STATE))

    @classmethod
    def general(cls, theta: float) -> "MeasurementBasis":
        return cls("G", general_states(theta), theta=float(theta))

    @classmethod
    def named(cls, label: str, theta: float | None = None) -> "MeasurementBasis":
        if label == "Z":
            return cls.z()
        if label == "X":
            return cls.x()
        if label == "Y":
            return cls.y()
        if label == "G":
            if theta is None:
                raise ValueError("general basis needs an angle")
            return cls.general(theta)
        raise ValueError(f"unknown basis label {label!r}")

    def matrix(self) -> np.ndarray:
        """Columns are the basis vectors."""
        return np.column_stack([v.amplitudes for v in self.vectors])

    def __eq__(self, other):
        if not isinstance(other, MeasurementBasis):
            return NotImplemented
        return self.label == other.label and self.theta == other.theta

    def __hash__(self):
        return hash((self.label, self.theta))


class RandomStream:
    """Reproducible random source keyed by ``(seed, substream)``.

    The substream is normally ``(session id, round index)``.  Two streams
    built from equal keys produce identical draw sequences.
    """

    def __init__(self, seed: int, substream: Sequence[int] = (0, 0)):
        self.seed = int(seed)
        self.substream = tuple(int(s) for s in substream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.substream)
        self._gen = np.random.default_rng(ss)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, substream={self.substream})"


# -- operations ---------------------------------------------------------------


def apply(u: Unitary, s: PureState) -> PureState:
    if u.dim != s.dim:
        raise ValueError(f"dimension mismatch: unitary {u.dim}, state {s.dim}")
    return PureState(u.matrix @ s.amplitudes, normalize=True)


def tensor(a: PureState, b: PureState) -> PureState:
    if a.n_qubits + b.n_qubits > MAX_QUBITS:
        raise ValueError("combined state exceeds the 4-qubit cap")
    return PureState(np.kron(a.amplitudes, b.amplitudes), normalize=True)


def _split_on(s: PureState, which: int, basis: MeasurementBasis) -> np.ndarray:
    """Return the (2, rest) array of unnormalized branch vectors."""
    n = s.n_qubits
    if not 0 <= which < n:
        raise IndexError(f"qubit index {which} out of range for {n} qubits")
    psi = np.moveaxis(s.amplitudes.reshape((2,) * n), which, 0).reshape(2, -1)
    return basis.matrix().conj().T @ psi


def born_probabilities(s: PureState, which: int, basis: MeasurementBasis) -> tuple[float, float]:
    branches = _split_on(s, which, basis)
    p = np.einsum("ij,ij->i", branches.conj(), branches).real
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    return float(p[0]), float(p[1])


def measure_qubit(
    s: PureState, which: int, basis: MeasurementBasis, rng: RandomStream
) -> tuple[int, PureState]:
    """Projectively measure one qubit; return (outcome, collapsed state)."""
    branches = _split_on(s, which, basis)
    p0, _ = born_probabilities(s, which, basis)
    outcome = 0 if rng.random() < p0 else 1
    n = s.n_qubits
    rest = branches[outcome]
    post = np.kron(basis.vectors[outcome].amplitudes, rest) if n > 1 else basis.vectors[outcome].amplitudes
    if n > 1:
        post = np.moveaxis(post.reshape((2,) * n), 0, which).ravel()
    return outcome, PureState(post, normalize=True)


# -- batched helpers used by the round engine ---------------------------------


def batch_apply(mats: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Apply a stack of matrices (N, d, d) or one matrix (d, d) to states (N, d)."""
    if mats.ndim == 2:
        return states @ mats.T
    return np.einsum("nij,nj->ni", mats, states)


def batch_outcome_prob0(states: np.ndarray, basis_mats: np.ndarray) -> np.ndarray:
    """Born probability of outcome 0 for single-qubit states (N, 2).

    ``basis_mats`` is (N, 2, 2) with basis vectors as columns.
    """
    amp = np.einsum("ni,ni->n", basis_mats[:, :, 0].conj(), states)
    return np.clip(np.abs(amp) ** 2, 0.0, 1.0)


def haar_qubits(normals: np.ndarray) -> np.ndarray:
    """Map (N, 4) standard normals to Haar-random single-qubit states (N, 2)."""
    v = normals[:, :2] + 1j * normals[:, 2:]
    return v / np.linalg.norm(v, axis=1, keepdims=True)
