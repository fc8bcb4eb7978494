"""Attack strategies for the round engine.

Strategies only ever see quantum signals in transit and public
announcements.  The engine calls the vectorized hooks; the scalar
functions below model the same attacks on single pulses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .discrimination import (
    DiscriminationProblem,
    ProbeSpec,
    UsdInfeasible,
    min_error,
    operator_outputs,
    unambiguous_discrimination,
)
from .opsets import OperatorCatalog
from .pnp import Provenance, Pulse
from .qmath import PLUS, ZERO, MeasurementBasis, PureState, RandomStream, tensor

# Below this a POVM outcome probability is treated as exactly zero.
PROB_FLOOR = 1e-13


class DiscriminationMethod(str, enum.Enum):
    MIN_ERROR = "min_error"
    UNAMBIGUOUS = "unambiguous"


class CheatMode(str, enum.Enum):
    WRONG_BASIS = "wrong_basis"
    CONSTANT = "constant"


@dataclass(frozen=True)
class InterceptResend:
    """Measure every signal in transit and resend the observed eigenstate.

    ``basis_policy`` is ``"random"`` (uniform over the protocol bases) or a
    basis label used every round.
    """

    basis_policy: str = "random"
    kind = "intercept_resend"


@dataclass(frozen=True)
class PnaAttack:
    """Append probe photons to Alice's pulse to learn Bob's operator."""

    probes: tuple[PureState, ...] = (ZERO, PLUS)
    method: DiscriminationMethod = DiscriminationMethod.UNAMBIGUOUS
    kind = "pna"

    def __post_init__(self):
        if not 1 <= len(self.probes) <= 2:
            raise ValueError("exact mode allows one or two probe photons")
        object.__setattr__(self, "method", DiscriminationMethod(self.method))


@dataclass(frozen=True)
class PnsAttack:
    """Keep one photon of each multi-photon pulse; block single photons."""

    block_single: float = 0.0
    kind = "pns"

    def __post_init__(self):
        if not 0.0 <= self.block_single <= 1.0:
            raise ValueError("block_single must lie in [0, 1]")


@dataclass(frozen=True)
class MeasurementCheat:
    """Untrusted measurer announcing outcomes that are not honest."""

    mode: CheatMode = CheatMode.WRONG_BASIS
    constant: int = 0
    kind = "cheat"

    def __post_init__(self):
        object.__setattr__(self, "mode", CheatMode(self.mode))


AttackStrategy = Union[InterceptResend, PnaAttack, PnsAttack, MeasurementCheat]


# -- scalar attack steps ------------------------------------------------------


def intercept_resend(
    signal: PureState, bases: Sequence[MeasurementBasis], basis_policy: str, rng: RandomStream
) -> tuple[PureState, dict]:
    """Measure ``signal`` in a policy basis and resend the eigenstate seen."""
    if basis_policy == "random":
        basis = bases[int(rng.integers(len(bases)))]
    else:
        basis = next(b for b in bases if b.label == basis_policy)
    p0 = abs(basis.vectors[0].inner(signal)) ** 2
    outcome = 0 if rng.random() < p0 else 1
    return basis.vectors[outcome], {"basis": basis.label, "outcome": outcome}


def pna_attach(pulse: Pulse, probes: Sequence[PureState]) -> Pulse:
    return pulse.append(probes, Provenance.EVE_PROBE)


def pna_extract(pulse: Pulse) -> tuple[Pulse, tuple[PureState, ...]]:
    """Split Eve's own photons back out of a pulse leaving Bob.

    Eve re-identifies her probes through degrees of freedom outside the
    qubit (timing, wavelength), modeled here by the provenance tags.  A pulse
    that went through purification holds no probes, so none come back.
    """
    keep = [(p, t) for p, t in zip(pulse.photons, pulse.tags) if t is not Provenance.EVE_PROBE]
    probes = tuple(p for p, t in zip(pulse.photons, pulse.tags) if t is Provenance.EVE_PROBE)
    delivered = Pulse(tuple(p for p, _ in keep), tuple(t for _, t in keep), pulse.intensity)
    return delivered, probes


class ProbeDiscriminator:
    """Eve's measurement on the returned probe photons.

    Precomputes the POVM once for a catalog and probe set; outcome ``k <
    len(catalog)`` names operator k, outcome ``len(catalog)`` is
    inconclusive (unambiguous method only).
    """

    def __init__(self, catalog: OperatorCatalog, probes: Sequence[PureState], method):
        self.method = DiscriminationMethod(method)
        self.catalog = catalog
        probe = probes[0]
        for p in probes[1:]:
            probe = tensor(probe, p)
        self.probe_spec = ProbeSpec(1, probe, copies=len(probes))
        outputs = operator_outputs(catalog.stack, self.probe_spec)
        problem = DiscriminationProblem(outputs)
        self.infeasible = False
        if self.method is DiscriminationMethod.UNAMBIGUOUS:
            try:
                self.result = unambiguous_discrimination(problem)
                self.elements = np.stack(self.result.povm.elements)
            except UsdInfeasible:
                # no output lies outside the span of the others: the optimal
                # unambiguous measurement is always inconclusive
                self.infeasible = True
                self.result = None
                dim = problem.matrix().shape[0]
                self.elements = np.zeros((len(catalog) + 1, dim, dim), dtype=complex)
                self.elements[-1] = np.eye(dim)
        else:
            self.result = min_error(problem)
            self.elements = np.stack(self.result.povm.elements)

    def probabilities(self, held: np.ndarray) -> np.ndarray:
        """Outcome probabilities for held probe states (N, D)."""
        p = np.einsum("nd,kde,ne->nk", held.conj(), self.elements, held).real
        p[p < PROB_FLOOR] = 0.0
        return p / p.sum(axis=1, keepdims=True)

    def guess(self, held: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Operator index per round, or -1 for an inconclusive outcome."""
        p = self.probabilities(held)
        outcome = (np.cumsum(p, axis=1) <= u[:, None]).sum(axis=1)
        outcome = np.minimum(outcome, p.shape[1] - 1)
        return np.where(outcome < len(self.catalog), outcome, -1)


@lru_cache(maxsize=32)
def _discriminator(catalog: OperatorCatalog, probes: tuple[PureState, ...], method: str) -> ProbeDiscriminator:
    return ProbeDiscriminator(catalog, probes, method)


def discriminator_for(catalog: OperatorCatalog, attack: PnaAttack) -> ProbeDiscriminator:
    return _discriminator(catalog, tuple(attack.probes), attack.method.value)


def pna_discriminate(
    held: Sequence[PureState], catalog: OperatorCatalog, attack: PnaAttack, rng: RandomStream
) -> str | None:
    """Guess Bob's operator from the probes Eve got back.

    Eve knows which probe states she sent (``attack.probes``).  Returns the
    operator label, or None for an inconclusive outcome.  With no probes
    back she can only guess uniformly.
    """
    if not held:
        return catalog.labels[int(rng.integers(len(catalog)))]
    if len(held) != len(attack.probes):
        raise ValueError("held probes do not match the probes sent")
    state = held[0]
    for p in held[1:]:
        state = tensor(state, p)
    disc = discriminator_for(catalog, attack)
    k = int(disc.guess(state.amplitudes[None, :], np.array([rng.random()]))[0])
    return None if k < 0 else catalog.labels[k]


def pns_split(
    pulse: Pulse, rng: RandomStream, block_single: float = 0.0
) -> tuple[PureState | None, Pulse]:
    """Photon-number splitting on one pulse.

    Eve stores one photon of a multi-photon pulse and forwards the rest;
    a single-photon pulse is blocked with probability ``block_single``.
    """
    if len(pulse) >= 2:
        return pulse.photons[0], Pulse(pulse.photons[1:], pulse.tags[1:], pulse.intensity)
    if len(pulse) == 1 and rng.random() < block_single:
        return None, Pulse((), (), pulse.intensity)
    return None, pulse
