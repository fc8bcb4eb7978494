"""Weak-coherent sources, lossy channels and decoy-state consistency checks.

The single-photon yield bound is the standard vacuum + weak-decoy inequality
from the decoy-state literature; it is an external formula, not derived here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pnp import MAX_EXACT_PHOTONS, Provenance, Pulse
from .qmath import PureState, RandomStream

STANDARD_MDI_QUBITS_PER_BIT = 8
MIN_COUNTS = 10_000

_PAULIS = np.array(
    [np.eye(2), [[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex
)


class InsufficientCounts(ValueError):
    pass


@dataclass(frozen=True)
class Intensity:
    label: str
    mu: float
    prob: float


@dataclass(frozen=True)
class IntensitySchedule:
    intensities: tuple[Intensity, ...]

    def __post_init__(self):
        labels = [i.label for i in self.intensities]
        if len(set(labels)) != len(labels) or not set(labels) <= {"signal", "decoy", "vacuum"}:
            raise ValueError("intensity labels must be distinct members of signal/decoy/vacuum")
        if "signal" not in labels:
            raise ValueError("schedule needs a signal intensity")
        if any(i.mu < 0 or i.prob < 0 for i in self.intensities):
            raise ValueError("intensities and probabilities must be non-negative")
        if abs(sum(i.prob for i in self.intensities) - 1.0) > 1e-9:
            raise ValueError("intensity probabilities must sum to 1")
        by = {i.label: i for i in self.intensities}
        if "vacuum" in by and by["vacuum"].mu != 0:
            raise ValueError("vacuum intensity must be 0")
        if "decoy" in by and not by["signal"].mu > by["decoy"].mu >= 0:
            raise ValueError("need signal mu > decoy mu >= 0")

    @classmethod
    def standard(cls, signal: float = 0.8, decoy: float = 0.2, probs=(0.5, 0.4, 0.1)) -> "IntensitySchedule":
        return cls(
            (
                Intensity("signal", signal, probs[0]),
                Intensity("decoy", decoy, probs[1]),
                Intensity("vacuum", 0.0, probs[2]),
            )
        )

    @classmethod
    def signal_only(cls, mu: float) -> "IntensitySchedule":
        return cls((Intensity("signal", mu, 1.0),))

    @property
    def labels(self) -> list[str]:
        return [i.label for i in self.intensities]

    @property
    def mus(self) -> np.ndarray:
        return np.array([i.mu for i in self.intensities])

    @property
    def probs(self) -> np.ndarray:
        return np.array([i.prob for i in self.intensities])

    @property
    def signal_index(self) -> int:
        return self.labels.index("signal")

    def mu(self, label: str) -> float:
        return self.intensities[self.labels.index(label)].mu


@dataclass(frozen=True)
class ChannelModel:
    """Photon loss, detector dark counts and a depolarizing fault."""

    transmittance: float = 1.0
    dark_count: float = 0.0
    depolarizing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.transmittance <= 1.0:
            raise ValueError("transmittance must lie in [0, 1]")
        if not 0.0 <= self.dark_count <= 1.0:
            raise ValueError("dark count probability must lie in [0, 1]")
        if not 0.0 <= self.depolarizing <= 1.0:
            raise ValueError("depolarizing probability must lie in [0, 1]")

    @property
    def is_ideal(self) -> bool:
        return self.transmittance == 1.0 and self.dark_count == 0.0 and self.depolarizing == 0.0


def depolarizing_branches(p: float, u: np.ndarray) -> np.ndarray:
    """Pauli branch index per uniform: I w.p. 1 - 3p/4, else X, Y, Z w.p. p/4 each."""
    edges = np.array([1 - 3 * p / 4, 1 - p / 2, 1 - p / 4])
    return np.searchsorted(edges, u, side="right")


@dataclass
class GainYieldStats:
    """Per-intensity counts plus simulation ground truth per photon number.

    ``photon_sent``/``photon_detected`` are ground truth; estimators must
    only use :meth:`gain`.
    """

    labels: list[str]
    mus: np.ndarray
    sent: np.ndarray
    detected: np.ndarray
    photon_sent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    photon_detected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def empty(cls, schedule: IntensitySchedule) -> "GainYieldStats":
        k = len(schedule.labels)
        return cls(list(schedule.labels), schedule.mus, np.zeros(k, np.int64), np.zeros(k, np.int64))

    def record(self, label_idx: np.ndarray, photons: np.ndarray, clicked: np.ndarray) -> None:
        k = len(self.labels)
        self.sent += np.bincount(label_idx, minlength=k)
        self.detected += np.bincount(label_idx[clicked], minlength=k)
        top = int(photons.max(initial=0)) + 1
        ps = np.bincount(photons, minlength=top)
        pd = np.bincount(photons[clicked], minlength=top)
        size = max(top, self.photon_sent.size)
        self.photon_sent = _pad(self.photon_sent, size) + _pad(ps, size)
        self.photon_detected = _pad(self.photon_detected, size) + _pad(pd, size)

    def merge(self, other: "GainYieldStats") -> "GainYieldStats":
        size = max(self.photon_sent.size, other.photon_sent.size)
        return GainYieldStats(
            list(self.labels),
            self.mus,
            self.sent + other.sent,
            self.detected + other.detected,
            _pad(self.photon_sent, size) + _pad(other.photon_sent, size),
            _pad(self.photon_detected, size) + _pad(other.photon_detected, size),
        )

    def gain(self, label: str) -> float:
        i = self.labels.index(label)
        if self.sent[i] == 0:
            return float("nan")
        return float(self.detected[i] / self.sent[i])

    def count(self, label: str) -> int:
        return int(self.sent[self.labels.index(label)])

    def true_yield(self, n: int) -> float:
        if n >= self.photon_sent.size or self.photon_sent[n] == 0:
            return float("nan")
        return float(self.photon_detected[n] / self.photon_sent[n])

    def to_rows(self) -> list[dict]:
        return [
            {"intensity": lab, "mu": float(mu), "sent": int(s), "detected": int(d),
             "gain": float(d / s) if s else None}
            for lab, mu, s, d in zip(self.labels, self.mus, self.sent, self.detected)
        ]


def _pad(a: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.int64)
    out[: a.size] = a
    return out


def sample_photon_number(mu: float, rng: RandomStream) -> int:
    if mu < 0:
        raise ValueError("mean photon number must be non-negative")
    return int(rng.generator.poisson(mu))


def weak_coherent_pulse(state: PureState, mu: float, rng: RandomStream) -> Pulse:
    """Poisson photon number, every photon in the same encoded state.

    Photon numbers above the exact-mode cap of three are truncated.
    """
    n = min(sample_photon_number(mu, rng), MAX_EXACT_PHOTONS)
    return Pulse((state,) * n, (Provenance.FROM_ALICE,) * n, intensity=mu)


def transmit(pulse: Pulse, channel: ChannelModel, rng: RandomStream) -> Pulse:
    """Independent loss and depolarizing fault per photon."""
    photons, tags = [], []
    for ph, tag in zip(pulse.photons, pulse.tags):
        if rng.random() >= channel.transmittance:
            continue
        branch = int(depolarizing_branches(channel.depolarizing, np.array([rng.random()]))[0])
        if branch:
            ph = PureState(_PAULIS[branch] @ ph.amplitudes, normalize=True)
        photons.append(ph)
        tags.append(tag)
    return Pulse(tuple(photons), tuple(tags), pulse.intensity)


def detect(pulse: Pulse, channel: ChannelModel, rng: RandomStream) -> bool:
    """Threshold detection: any photon, or a dark count."""
    dark = rng.random() < channel.dark_count
    return len(pulse) > 0 or dark


def run_decoy_experiment(
    schedule: IntensitySchedule,
    channel: ChannelModel,
    n_pulses: int,
    rng: np.random.Generator,
    pns_block: float | None = None,
) -> GainYieldStats:
    """Vectorized gain/yield experiment for one link.

    With ``pns_block`` set, a photon-number-splitting adversary keeps one
    photon of every multi-photon pulse, sends the rest over a lossless line
    and blocks single-photon pulses with that probability.
    """
    label = rng.choice(len(schedule.labels), size=n_pulses, p=schedule.probs)
    n = rng.poisson(schedule.mus[label])
    if pns_block is None:
        arrived = rng.binomial(n, channel.transmittance)
    else:
        arrived = np.where(n >= 2, n - 1, n)
        blocked = (n == 1) & (rng.random(n_pulses) < pns_block)
        arrived = np.where(blocked, 0, arrived)
    dark = rng.random(n_pulses) < channel.dark_count
    clicked = (arrived > 0) | dark
    stats = GainYieldStats.empty(schedule)
    stats.record(label, n, clicked)
    return stats


def estimate_y1_lower_bound(stats: GainYieldStats, signal: str = "signal", decoy: str = "decoy") -> float:
    """Vacuum + weak-decoy lower bound on the single-photon yield.

    Y1 >= mu / (mu nu - nu^2) * (Q_nu e^nu - Q_mu e^mu nu^2/mu^2 - (mu^2 - nu^2)/mu^2 Y0)

    Y0 is the vacuum gain (zero if no vacuum intensity is scheduled).
    Negative values are clamped to zero.
    """
    mu = float(stats.mus[stats.labels.index(signal)])
    nu = float(stats.mus[stats.labels.index(decoy)])
    if not mu > nu > 0:
        raise ValueError("need signal mu > decoy nu > 0")
    for lab in stats.labels:
        if stats.count(lab) < MIN_COUNTS:
            raise InsufficientCounts(f"only {stats.count(lab)} pulses at intensity {lab!r}")
    q_mu, q_nu = stats.gain(signal), stats.gain(decoy)
    y0 = stats.gain("vacuum") if "vacuum" in stats.labels else 0.0
    bound = mu / (mu * nu - nu**2) * (
        q_nu * np.exp(nu) - q_mu * np.exp(mu) * nu**2 / mu**2 - (mu**2 - nu**2) / mu**2 * y0
    )
    return max(0.0, float(bound))


@dataclass(frozen=True)
class DecoyCheck:
    y1_lower: float
    implied_transmittance: float
    consistent: bool

    def as_dict(self) -> dict:
        return {
            "y1_lower_bound": self.y1_lower,
            "implied_transmittance": self.implied_transmittance,
            "consistent": self.consistent,
        }


def check_consistency(stats: GainYieldStats, ratio: float = 0.5) -> DecoyCheck:
    """Compare the single-photon yield bound with the signal gain.

    For an honest Poissonian channel Y1 is close to the transmittance
    implied by the signal gain.  The check fails when the bound falls
    below ``ratio`` times that transmittance, which is what a photon-number
    splitting attack that starves single-photon pulses produces.
    """
    y1 = estimate_y1_lower_bound(stats)
    mu = stats.mus[stats.labels.index("signal")]
    y0 = stats.gain("vacuum") if "vacuum" in stats.labels else 0.0
    q = stats.gain("signal")
    eta = -np.log(max(1e-300, (1 - q) / (1 - y0))) / mu if q < 1 else float("inf")
    return DecoyCheck(y1, float(eta), bool(y1 >= ratio * eta))


def qubits_per_raw_bit(report) -> float:
    """Alice's non-decoy pulses spent per raw key bit."""
    if report.raw_key_bits == 0:
        raise ZeroDivisionError("session produced no raw key bits")
    return report.alice_signal_pulses / report.raw_key_bits

