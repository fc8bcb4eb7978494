"""Photon-number purification.

Bob never encodes the photons he receives.  He picks one incoming photon as
control, copies its basis value onto a fresh ancilla with a basis-matched
CNOT, measures the control, drops everything else and sends on only the
ancilla.  Photons an adversary appended to the pulse therefore never leave
Bob's station.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .common import Verdict
from .qmath import MeasurementBasis, PureState, RandomStream, Unitary, haar_qubits

MAX_EXACT_PHOTONS = 3

_CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex)
_GATE_NAMES = {"Z": "C0", "X": "C+", "Y": "CY", "G": "CG"}


class Provenance(enum.Enum):
    FROM_ALICE = "FromAlice"
    EVE_PROBE = "EveProbe"
    BOB_ANCILLA = "BobAncilla"


class ControlPolicy(str, enum.Enum):
    FIRST = "first"
    RANDOM = "random"


@dataclass(frozen=True)
class Pulse:
    """Multi-photon signal.

    ``tags`` are simulation bookkeeping.  Honest parties only ever see
    :meth:`view`, which drops them.
    """

    photons: tuple[PureState, ...] = ()
    tags: tuple[Provenance, ...] = ()
    intensity: float = 0.0

    def __post_init__(self):
        if len(self.photons) != len(self.tags):
            raise ValueError("every photon needs a provenance tag")
        if len(self.photons) > MAX_EXACT_PHOTONS:
            raise ValueError(f"exact mode allows at most {MAX_EXACT_PHOTONS} photons")
        if any(p.dim != 2 for p in self.photons):
            raise ValueError("photons carry single-qubit states")

    @classmethod
    def single(cls, state: PureState, tag: Provenance = Provenance.FROM_ALICE) -> "Pulse":
        return cls((state,), (tag,))

    def __len__(self):
        return len(self.photons)

    def view(self) -> tuple[PureState, ...]:
        return tuple(self.photons)

    def append(self, states, tag: Provenance) -> "Pulse":
        states = tuple(states)
        return Pulse(self.photons + states, self.tags + (tag,) * len(states), self.intensity)


@dataclass(frozen=True)
class CopyGate:
    label: str
    matrix: np.ndarray
    basis: MeasurementBasis

    @property
    def ancilla(self) -> PureState:
        """Fresh source state: the index-0 vector of the copy basis."""
        return self.basis.vectors[0]


def copy_gate_for(basis: MeasurementBasis) -> CopyGate:
    """CNOT conjugated into ``basis``: |b_i>|b_0> -> |b_i>|b_i>."""
    w = basis.matrix()
    ww = np.kron(w, w)
    m = ww @ _CNOT @ ww.conj().T
    Unitary(m)  # validates unitarity
    return CopyGate(_GATE_NAMES[basis.label], m, basis)


def copy_gate(label: str) -> CopyGate:
    table = {"C0": MeasurementBasis.z(), "C+": MeasurementBasis.x(), "CY": MeasurementBasis.y()}
    if label not in table:
        raise ValueError(f"unknown copy gate {label!r}")
    return copy_gate_for(table[label])


@dataclass(frozen=True)
class PnpResult:
    output_photon: PureState | None
    control_diagnostic: int | None
    removed_count: int
    pnp_basis: MeasurementBasis
    aborted: bool = False

    def output_pulse(self) -> Pulse:
        if self.aborted:
            return Pulse()
        return Pulse.single(self.output_photon, Provenance.BOB_ANCILLA)


def purify_kernel(
    controls: np.ndarray,
    gates: np.ndarray,
    basis_mats: np.ndarray,
    u_measure: np.ndarray,
    fault: np.ndarray,
    fault_states: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized purification of N control photons.

    Parameters
    ----------
    controls : (N, 2) control photon states
    gates : (N, 4, 4) copy gate per round
    basis_mats : (N, 2, 2) purification basis, vectors as columns
    u_measure : (N,) uniforms deciding the control measurement
    fault : (N,) bool, gate fault in this round
    fault_states : (N, 2) replacement ancilla states used on a fault

    Returns
    -------
    (ancilla states (N, 2), control outcomes (N,))
    """
    anc = basis_mats[:, :, 0]
    joint = np.einsum("nij,nj->ni", gates, np.einsum("ni,nj->nij", controls, anc).reshape(-1, 4))
    joint = joint.reshape(-1, 2, 2)  # [control, ancilla]
    # branch_k = (<b_k| (x) I) joint
    branches = np.einsum("nik,nij->nkj", basis_mats.conj(), joint)
    p0 = np.einsum("nj,nj->n", branches[:, 0].conj(), branches[:, 0]).real
    p1 = np.einsum("nj,nj->n", branches[:, 1].conj(), branches[:, 1]).real
    p0 = p0 / (p0 + p1)
    outcome = (u_measure >= p0).astype(int)
    out = branches[np.arange(len(outcome)), outcome]
    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    out = np.where(fault[:, None], fault_states, out)
    return out, outcome


def purify(
    pulse: Pulse,
    pnp_basis: MeasurementBasis,
    rng: RandomStream,
    gate_fidelity: float = 1.0,
    policy: ControlPolicy | str = ControlPolicy.RANDOM,
) -> PnpResult:
    """Replace an incoming pulse by one fresh photon carrying its basis value.

    With probability ``1 - gate_fidelity`` the gate output is replaced by a
    Haar-random ancilla.  An empty pulse aborts the round.
    """
    if not 0.0 < gate_fidelity <= 1.0:
        raise ValueError("gate_fidelity must lie in (0, 1]")
    photons = pulse.view()
    if not photons:
        return PnpResult(None, None, 0, pnp_basis, aborted=True)
    policy = ControlPolicy(policy)
    idx = 0 if policy is ControlPolicy.FIRST or len(photons) == 1 else int(rng.integers(len(photons)))
    gate = copy_gate_for(pnp_basis)
    u = np.array([rng.random()])
    fault = np.array([rng.random() < 1.0 - gate_fidelity])
    fault_state = haar_qubits(rng.generator.normal(size=(1, 4))) if fault[0] else np.zeros((1, 2), complex)
    out, outcome = purify_kernel(
        photons[idx].amplitudes[None, :],
        gate.matrix[None],
        pnp_basis.matrix()[None],
        u,
        fault,
        fault_state,
    )
    return PnpResult(PureState(out[0], normalize=True), int(outcome[0]), len(photons) - 1, pnp_basis)


def pnp_sift(alice_basis: str, pnp_basis: str) -> Verdict:
    """Rounds purified in a basis other than Alice's are discarded."""
    return Verdict.KEEP if alice_basis == pnp_basis else Verdict.DISCARD_PNP
