"""Round engine for the measurement-delegated prepare-and-measure protocols.

One round: Alice prepares a basis state, Bob (optionally) purifies the
incoming pulse, encodes with a random catalog operator and forwards the photon
to the untrusted measuring party, who measures in a basis and announces the
outcome.  Sifting keeps a round when Bob's operator maps Alice's basis onto
the measurement basis; Bob reads the key bit off his operator, Alice infers
it from her state, the public outcome and Bob's announced operator class.

The scalar functions (``alice_prepare``, ``sift``, ``decode_alice`` ...) define
the rules.  ``run_session`` executes many rounds at once on numpy arrays, with
sifting and decoding driven by lookup tables built from those same scalar
rules.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable

import numpy as np

from . import adversary as adv
from .common import ConfigError, Verdict
from .decoy import (
    STANDARD_MDI_QUBITS_PER_BIT,
    ChannelModel,
    GainYieldStats,
    InsufficientCounts,
    IntensitySchedule,
    check_consistency,
    depolarizing_branches,
)
from .opsets import (
    CatalogKind,
    CodingError,
    CodingMode,
    CodingScheme,
    Operator,
    OperatorCatalog,
    basis_image,
    build_catalog,
    coding_bit,
    default_coding,
)
from .pnp import ControlPolicy, copy_gate_for, purify_kernel
from .qmath import PureState, RandomStream, Unitary, haar_qubits

CHUNK = 1 << 15
DEFER_TO_EVE = None

_PAULIS = np.array([np.eye(2), [[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]], dtype=complex)
_BB84_HADAMARD_CLASS = ("H", "HXZ")

_VERDICT_CODES = list(Verdict)


def _default_pnp_bases(kind: CatalogKind) -> tuple[str, ...]:
    if kind is CatalogKind.SIX_STATE_24:
        return ("Z", "X", "Y")
    if kind is CatalogKind.GENERAL_12:
        return ("Z", "G")
    return ("Z", "X")


@dataclass(frozen=True)
class ProtocolConfig:
    """Everything needed to reproduce one session.

    Practical (weak-coherent) mode is on when ``alice_schedule`` is set;
    ``bob_schedule`` additionally makes Bob's re-emitted photon a weak
    coherent pulse.  ``delegate_measurement=False`` runs the ordinary
    prepare-and-measure protocol with Bob measuring himself.
    """

    kind: CatalogKind
    rounds: int
    seed: int
    theta: float | None = None
    coding: CodingMode | None = None
    error_sample_fraction: float = 0.1
    pnp_enabled: bool = False
    pnp_bases: tuple[str, ...] | None = None
    gate_fidelity: float = 1.0
    control_policy: ControlPolicy = ControlPolicy.RANDOM
    basis_chooser: str | None = None
    delegate_measurement: bool = True
    channel: ChannelModel = field(default_factory=ChannelModel)
    measurement_link: ChannelModel = field(default_factory=ChannelModel)
    attack: adv.AttackStrategy | None = None
    alice_schedule: IntensitySchedule | None = None
    bob_schedule: IntensitySchedule | None = None
    session_id: int = 0
    trace: bool = False
    threads: int = 1
    decoy_ratio: float = 0.5
    alice_bases: tuple[str, ...] | None = None

    def __post_init__(self):
        kind = CatalogKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "control_policy", ControlPolicy(self.control_policy))
        if self.coding is not None:
            object.__setattr__(self, "coding", CodingMode(self.coding))
        if self.pnp_bases is None:
            object.__setattr__(self, "pnp_bases", _default_pnp_bases(kind))
        else:
            object.__setattr__(self, "pnp_bases", tuple(self.pnp_bases))
        if self.alice_bases is not None:
            object.__setattr__(self, "alice_bases", tuple(self.alice_bases))
        if self.basis_chooser is None:
            object.__setattr__(self, "basis_chooser", "bob" if kind is CatalogKind.GENERAL_12 else "eve")
        self.validate()

    def validate(self) -> None:
        if self.rounds <= 0:
            raise ConfigError("rounds must be positive")
        if not 0.0 < self.error_sample_fraction < 1.0:
            raise ConfigError("error_sample_fraction must lie in (0, 1)")
        if not 0.0 < self.gate_fidelity <= 1.0:
            raise ConfigError("gate_fidelity must lie in (0, 1]")
        if self.basis_chooser not in ("eve", "bob"):
            raise ConfigError("basis_chooser must be 'eve' or 'bob'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            cat = self.catalog
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.alice_bases is not None:
            if not self.alice_bases or not set(self.alice_bases) <= set(cat.basis_labels):
                raise ConfigError("alice_bases must be a non-empty subset of the protocol bases")
        if self.pnp_enabled:
            if not self.pnp_bases:
                raise ConfigError("PNP enabled with an empty purification basis set")
            if set(self.pnp_bases) != set(_default_pnp_bases(self.kind)) or len(set(self.pnp_bases)) != len(self.pnp_bases):
                raise ConfigError(f"{self.kind.value} purifies in {_default_pnp_bases(self.kind)}")
            if not set(self.pnp_bases) <= set(cat.basis_labels):
                raise ConfigError("purification bases must be protocol bases")
        attack = self.attack
        if isinstance(attack, adv.PnsAttack) and self.alice_schedule is None:
            raise ConfigError("the PNS attack needs weak-coherent (practical) mode")
        if isinstance(attack, adv.InterceptResend) and attack.basis_policy != "random":
            if attack.basis_policy not in cat.basis_labels:
                raise ConfigError(f"intercept basis {attack.basis_policy!r} is not a protocol basis")
        if not self.delegate_measurement:
            if self.pnp_enabled:
                raise ConfigError("purification only applies when measurement is delegated")
            if isinstance(attack, (adv.PnaAttack, adv.MeasurementCheat)):
                raise ConfigError(f"{type(attack).__name__} targets the delegated measurement")
        if self.bob_schedule is not None and (self.alice_schedule is None or not self.pnp_enabled):
            raise ConfigError("a Bob intensity schedule needs practical mode with PNP")
        if self.coding is CodingMode.FIXED_PER_OPERATOR and self.kind is not CatalogKind.BB84_4:
            from .opsets import coding_violations

            if coding_violations(cat, CodingScheme.fixed(cat)):
                raise ConfigError(f"FixedPerOperator coding is ill-defined for {self.kind.value}")

    @cached_property
    def catalog(self) -> OperatorCatalog:
        return build_catalog(self.kind, self.theta)

    @property
    def coding_scheme(self) -> CodingScheme:
        if self.coding is None:
            return default_coding(self.catalog)
        if self.coding is CodingMode.FIXED_PER_OPERATOR:
            return CodingScheme.fixed(self.catalog)
        return CodingScheme.flip_parity()

    @property
    def practical(self) -> bool:
        return self.alice_schedule is not None


@dataclass(frozen=True)
class Round:
    index: int
    alice_basis: str
    alice_index: int
    bob_operator: str | None
    pnp_basis: str | None
    measurement_basis: str
    eve_outcome: int | None
    sift_verdict: Verdict
    alice_bit: int | None = None
    bob_bit: int | None = None
    alice_intensity: str | None = None
    bob_intensity: str | None = None


# -- scalar protocol rules ----------------------------------------------------


def alice_prepare(catalog: OperatorCatalog, rng: RandomStream) -> tuple[str, int, PureState]:
    """Uniform draw over the protocol's legal states."""
    b = catalog.bases[int(rng.integers(len(catalog.bases)))]
    i = int(rng.integers(2))
    return b.label, i, b.vectors[i]


def _unique_targets(catalog: OperatorCatalog) -> np.ndarray:
    """Target basis index when an operator has only one possible image, else -1."""
    out = np.full(len(catalog), -1, dtype=int)
    for k, row in enumerate(catalog.image_table):
        targets = set(int(t) for t in row if t >= 0)
        if len(targets) == 1:
            out[k] = targets.pop()
    return out


def bob_choose(catalog: OperatorCatalog, rng: RandomStream, basis_chooser: str | None = None) -> tuple[str, str | None]:
    """Pick Bob's operator and, when Bob chooses it, the measurement basis.

    Bob fixes the basis when his operator has a single possible image basis
    and flips a fair coin between protocol bases otherwise.  When the
    measuring party chooses, returns ``DEFER_TO_EVE`` (None) for the basis.
    """
    if basis_chooser is None:
        basis_chooser = "bob" if catalog.kind is CatalogKind.GENERAL_12 else "eve"
    k = int(rng.integers(len(catalog)))
    op = catalog.labels[k]
    if basis_chooser == "eve":
        return op, DEFER_TO_EVE
    coin = int(rng.integers(len(catalog.bases)))
    t = _unique_targets(catalog)[k]
    return op, catalog.bases[t if t >= 0 else coin].label


def sift(catalog: OperatorCatalog, alice_basis: str, bob_operator: str, measurement_basis: str) -> Verdict:
    if catalog.kind is CatalogKind.BB84_4:
        # Bob announces whether his operator is in {H, HXZ}
        hadamard = bob_operator in _BB84_HADAMARD_CLASS
        keep = hadamard == (alice_basis != measurement_basis)
    else:
        keep = basis_image(catalog, bob_operator, alice_basis) == measurement_basis
    return Verdict.KEEP if keep else Verdict.DISCARD_BASIS


def _consistent_bit(
    catalog: OperatorCatalog,
    coding: CodingScheme,
    op_class: int,
    alice_basis: str,
    alice_index: int,
    measurement_basis: str,
    outcome: int,
) -> int | None:
    """Bit shared by every announced-class operator consistent with the record."""
    src = catalog.basis(alice_basis)
    tgt = catalog.basis(measurement_basis)
    psi = src.vectors[alice_index].amplitudes
    seen = tgt.vectors[outcome].amplitudes
    bits = set()
    for k, entry in enumerate(catalog.entries):
        if catalog.class_ids[k] != op_class:
            continue
        if basis_image(catalog, entry.label, alice_basis) != measurement_basis:
            continue
        if abs(np.vdot(seen, entry.matrix @ psi)) ** 2 > 1 - 1e-9:
            bits.add(coding_bit(coding, catalog, entry.label, (alice_basis, measurement_basis)))
    if not bits:
        return None
    if len(bits) > 1:
        raise CodingError("consistent operators disagree on the key bit")
    return bits.pop()


def decode_alice(rnd: Round, catalog: OperatorCatalog, coding: CodingScheme | None = None) -> int | None:
    """Alice's key bit, or None when no announced-class operator fits (an error event).

    Alice uses only her own preparation, the public measurement record and
    the operator class Bob announced.
    """
    coding = coding or default_coding(catalog)
    op_class = int(catalog.class_ids[catalog.index(rnd.bob_operator)])
    return _consistent_bit(
        catalog, coding, op_class, rnd.alice_basis, rnd.alice_index, rnd.measurement_basis, rnd.eve_outcome
    )


def decode_bob(rnd: Round, catalog: OperatorCatalog, coding: CodingScheme | None = None) -> int:
    coding = coding or default_coding(catalog)
    return coding_bit(coding, catalog, rnd.bob_operator, (rnd.alice_basis, rnd.measurement_basis))


def estimate_qber(rounds: Iterable[Round]) -> float | None:
    pairs = [(r.alice_bit, r.bob_bit) for r in rounds]
    if not pairs:
        return None
    return sum(a != b for a, b in pairs) / len(pairs)


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def asymptotic_key_rate(qber: float, sift_fraction: float) -> float:
    """Standard BB84-style estimate sift * max(0, 1 - 2 h2(qber)); not a security proof."""
    if not 0.0 <= qber <= 0.5:
        raise ValueError("qber must lie in [0, 0.5]")
    return sift_fraction * max(0.0, 1.0 - 2.0 * binary_entropy(qber))


# -- session report -----------------------------------------------------------


@dataclass
class SessionReport:
    rounds_total: int
    lost_count: int
    kept_count: int
    error_sample_count: int
    raw_key_bits: int
    sift_fraction: float
    qber: float | None
    sifted_error_rate: float | None
    eve_guess_rate: float | None
    eve_operator_guesses: int
    eve_operator_correct: int
    eve_probes_returned: int
    eve_conclusive_rounds: int
    eve_conclusive_guess_rate: float | None
    alice_signal_pulses: int
    qubits_per_raw_bit: float | None
    asymptotic_key_rate: float | None
    verdict_counts: dict
    pnp: dict | None = None
    decoy: dict | None = None
    standard_mdi_qubits_per_bit: int = STANDARD_MDI_QUBITS_PER_BIT
    _trace: dict | None = field(default=None, repr=False)
    _labels: dict | None = field(default=None, repr=False)

    @property
    def eve_operator_accuracy(self) -> float | None:
        if self.eve_operator_guesses == 0:
            return None
        return self.eve_operator_correct / self.eve_operator_guesses

    def as_dict(self) -> dict:
        return {
            "rounds_total": self.rounds_total,
            "lost_count": self.lost_count,
            "kept_count": self.kept_count,
            "error_sample_count": self.error_sample_count,
            "raw_key_bits": self.raw_key_bits,
            "sift_fraction": self.sift_fraction,
            "qber": self.qber,
            "sifted_error_rate": self.sifted_error_rate,
            "eve_guess_rate": self.eve_guess_rate,
            "eve_operator_guesses": self.eve_operator_guesses,
            "eve_operator_correct": self.eve_operator_correct,
            "eve_operator_accuracy": self.eve_operator_accuracy,
            "eve_probes_returned": self.eve_probes_returned,
            "eve_conclusive_rounds": self.eve_conclusive_rounds,
            "eve_conclusive_guess_rate": self.eve_conclusive_guess_rate,
            "alice_signal_pulses": self.alice_signal_pulses,
            "qubits_per_raw_bit": self.qubits_per_raw_bit,
            "standard_mdi_qubits_per_bit": self.standard_mdi_qubits_per_bit,
            "asymptotic_key_rate": self.asymptotic_key_rate,
            "verdict_counts": dict(self.verdict_counts),
            "pnp": self.pnp,
            "decoy": _public(self.decoy),
        }

    @property
    def trace(self) -> dict:
        if self._trace is None:
            raise ValueError("session was run without trace=True")
        return self._trace

    def rounds(self) -> list[Round]:
        t, lab = self.trace, self._labels
        out = []
        for n in range(self.rounds_total):
            verdict = _VERDICT_CODES[t["verdict"][n]]
            bits_ok = verdict in (Verdict.KEEP, Verdict.ERROR_SAMPLE)
            out.append(
                Round(
                    index=n,
                    alice_basis=lab["bases"][t["alice_basis"][n]],
                    alice_index=int(t["alice_index"][n]),
                    bob_operator=lab["ops"][t["operator"][n]] if t["operator"][n] >= 0 else None,
                    pnp_basis=lab["bases"][t["pnp_basis"][n]] if t["pnp_basis"][n] >= 0 else None,
                    measurement_basis=lab["bases"][t["measurement_basis"][n]],
                    eve_outcome=int(t["outcome"][n]) if t["outcome"][n] >= 0 else None,
                    sift_verdict=verdict,
                    alice_bit=_bit_or_none(t["alice_bit"][n]) if bits_ok else None,
                    bob_bit=_bit_or_none(t["bob_bit"][n]) if bits_ok else None,
                    alice_intensity=lab["alice_int"][t["alice_intensity"][n]] if lab["alice_int"] else None,
                    bob_intensity=lab["bob_int"][t["bob_intensity"][n]] if lab["bob_int"] and t["bob_intensity"][n] >= 0 else None,
                )
            )
        return out

    def trace_rows(self) -> list[dict]:
        rows = []
        for r in self.rounds():
            rows.append(
                {
                    "index": r.index,
                    "alice_basis": r.alice_basis,
                    "alice_index": r.alice_index,
                    "bob_operator": r.bob_operator or "",
                    "pnp_basis": r.pnp_basis or "",
                    "measurement_basis": r.measurement_basis,
                    "eve_outcome": "" if r.eve_outcome is None else r.eve_outcome,
                    "sift_verdict": r.sift_verdict.value,
                    "alice_bit": "" if r.alice_bit is None else r.alice_bit,
                    "bob_bit": "" if r.bob_bit is None else r.bob_bit,
                    "alice_intensity": r.alice_intensity or "",
                    "bob_intensity": r.bob_intensity or "",
                }
            )
        return rows


def _public(block):
    """Drop in-memory helper objects (keys starting with '_') from nested dicts."""
    if isinstance(block, dict):
        return {k: _public(v) for k, v in block.items() if not k.startswith("_")}
    return block


def _bit_or_none(v) -> int | None:
    return None if v < 0 else int(v)


# -- vectorized engine --------------------------------------------------------

_STREAMS = {
    name: i
    for i, name in enumerate(
        [
            "alice_basis", "alice_index", "alice_intensity", "photons", "attack_basis",
            "attack_measure", "pns_block", "loss", "depolarize", "dark_bob",
            "pnp_basis", "pnp_control", "pnp_measure", "pnp_fault", "pnp_haar", "pnp_dark_outcome",
            "bob_op", "bob_intensity", "bob_photons", "measure_basis", "bob_coin",
            "link_loss", "link_depolarize", "detect", "dark_eve", "dark_detector", "double_click",
            "sample", "eve_guess", "eve_coin",
        ]
    )
}


class _Streams:
    """One independent generator per (chunk, purpose).

    Each purpose has its own stream so a draw never shifts another
    purpose's randomness when the configuration changes.
    """

    def __init__(self, seed: int, session: int, chunk: int):
        self._key = (seed, session, chunk)

    def __call__(self, name: str) -> np.random.Generator:
        seed, session, chunk = self._key
        return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(session, chunk, _STREAMS[name])))


class _Context:
    def __init__(self, cfg: ProtocolConfig):
        self.cfg = cfg
        cat = cfg.catalog
        if not cfg.delegate_measurement:
            # ordinary protocol: Bob applies nothing and measures himself
            cat = OperatorCatalog(cat.kind, (Operator("I", Unitary(np.eye(2))),), cat.bases, cat.theta)
        self.catalog = cat
        self.coding = cfg.coding_scheme
        self.bases = list(cat.bases)
        nb = len(self.bases)
        self.basis_mats = np.stack([b.matrix() for b in self.bases])
        self.state_table = np.transpose(self.basis_mats, (0, 2, 1))  # [basis, index] -> vector
        self.op_stack = cat.stack
        self.class_ids = cat.class_ids
        self.unique_target = _unique_targets(cat)
        allowed = cfg.alice_bases or cat.basis_labels
        self.alice_bases = np.array([cat.basis_labels.index(b) for b in allowed])
        K = len(cat)
        labels = cat.basis_labels

        self.sift_keep = np.zeros((K, nb, nb), dtype=bool)
        self.bob_table = np.full((K, nb, nb), -1, dtype=int)
        for k, op in enumerate(cat.labels):
            for a, al in enumerate(labels):
                for m, ml in enumerate(labels):
                    keep = sift(cat, al, op, ml) is Verdict.KEEP
                    self.sift_keep[k, a, m] = keep
                    if keep and cfg.delegate_measurement:
                        self.bob_table[k, a, m] = coding_bit(self.coding, cat, op, (al, ml))

        n_cls = int(self.class_ids.max()) + 1
        self.alice_table = np.full((n_cls, nb, 2, nb, 2), -1, dtype=int)
        if cfg.delegate_measurement:
            for c in range(n_cls):
                for a, al in enumerate(labels):
                    for m, ml in enumerate(labels):
                        for i in range(2):
                            for o in range(2):
                                bit = _consistent_bit(cat, self.coding, c, al, i, ml, o)
                                self.alice_table[c, a, i, m, o] = -1 if bit is None else bit

        if cfg.pnp_enabled:
            self.pnp_to_basis = np.array([labels.index(b) for b in cfg.pnp_bases])
            pnp_b = [cat.basis(b) for b in cfg.pnp_bases]
            self.pnp_gates = np.stack([copy_gate_for(b).matrix for b in pnp_b])
            self.pnp_mats = np.stack([b.matrix() for b in pnp_b])

        attack = cfg.attack
        self.probes = None
        if isinstance(attack, adv.PnaAttack):
            self.probes = np.stack([p.amplitudes for p in attack.probes])
            if not cfg.pnp_enabled:
                self.discriminator = adv.discriminator_for(cat, attack)
        if isinstance(attack, adv.InterceptResend) and attack.basis_policy != "random":
            self.ir_fixed = labels.index(attack.basis_policy)


def _measure_photons(n, p0, streams, dark_prob):
    """Threshold detection of ``n`` identical photons in a two-detector basis.

    Returns the announced outcome (-1 when nothing clicked); double clicks
    are resolved by a fair coin.
    """
    k0 = streams("detect").binomial(n, p0)
    click0 = k0 > 0
    click1 = k0 < n
    N = len(n)
    dark = streams("dark_eve").random(N) < dark_prob
    det = streams("dark_detector").integers(0, 2, N)
    click0 = click0 | (dark & (det == 0))
    click1 = click1 | (dark & (det == 1))
    coin = streams("double_click").integers(0, 2, N)
    return np.where(click0 & click1, coin, np.where(click0, 0, np.where(click1, 1, -1)))


def _simulate_chunk(ctx: _Context, chunk: int, count: int) -> dict:
    cfg = ctx.cfg
    s = _Streams(cfg.seed, cfg.session_id, chunk)
    N = count
    nb = len(ctx.bases)
    K = len(ctx.catalog)
    attack = cfg.attack

    # Alice
    a_b = ctx.alice_bases[s("alice_basis").integers(0, len(ctx.alice_bases), N)]
    a_i = s("alice_index").integers(0, 2, N)
    psi = ctx.state_table[a_b, a_i]
    if cfg.practical:
        sched = cfg.alice_schedule
        a_lab = s("alice_intensity").choice(len(sched.labels), N, p=sched.probs)
        n_a = s("photons").poisson(sched.mus[a_lab])
        a_signal = a_lab == sched.signal_index
    else:
        a_lab = np.zeros(N, dtype=int)
        n_a = np.ones(N, dtype=int)
        a_signal = np.ones(N, dtype=bool)

    # attacks on the Alice -> Bob line
    ir_basis = np.full(N, -1)
    ir_out = np.full(N, -1)
    eve_copy = np.zeros(N, dtype=bool)
    n_fwd = n_a
    lossless = np.zeros(N, dtype=bool)
    if isinstance(attack, adv.InterceptResend):
        if attack.basis_policy == "random":
            eb = s("attack_basis").integers(0, nb, N)
        else:
            eb = np.full(N, ctx.ir_fixed)
        p0 = np.abs(np.einsum("ni,ni->n", ctx.basis_mats[eb, :, 0].conj(), psi)) ** 2
        out = (s("attack_measure").random(N) >= p0).astype(int)
        present = n_a > 0
        ir_basis = np.where(present, eb, -1)
        ir_out = np.where(present, out, -1)
        psi = np.where(present[:, None], ctx.state_table[eb, out], psi)
        n_fwd = np.minimum(n_a, 1)
    elif isinstance(attack, adv.PnsAttack):
        eve_copy = n_a >= 2
        n_fwd = np.where(eve_copy, n_a - 1, n_a)
        blocked = (n_a == 1) & (s("pns_block").random(N) < attack.block_single)
        n_fwd = np.where(blocked, 0, n_fwd)
        lossless[:] = True

    # channel
    ch = cfg.channel
    n_b = np.where(lossless, n_fwd, s("loss").binomial(n_fwd, ch.transmittance))
    branch = depolarizing_branches(ch.depolarizing, s("depolarize").random(N))
    psi = np.einsum("nij,nj->ni", _PAULIS[branch], psi)
    dark_b = s("dark_bob").random(N) < ch.dark_count

    k_probe = 0 if ctx.probes is None else len(ctx.probes)

    # Bob: purification
    pnp_b = np.full(N, -1)
    diag = np.full(N, -1)
    if cfg.pnp_enabled:
        pi = s("pnp_basis").integers(0, len(cfg.pnp_bases), N)
        pnp_b = ctx.pnp_to_basis[pi]
        m = n_b + k_probe
        present = m > 0
        if cfg.control_policy is ControlPolicy.FIRST:
            ctrl = np.zeros(N, dtype=int)
        else:
            ctrl = np.floor(s("pnp_control").random(N) * np.maximum(m, 1)).astype(int)
        ctrl_signal = ctrl < n_b
        control = psi.copy()
        if k_probe:
            pidx = np.clip(ctrl - n_b, 0, k_probe - 1)
            control = np.where(ctrl_signal[:, None], psi, ctx.probes[pidx])
        fault = s("pnp_fault").random(N) < 1.0 - cfg.gate_fidelity
        haar = haar_qubits(s("pnp_haar").normal(size=(N, 4)))
        out, diag = purify_kernel(control, ctx.pnp_gates[pi], ctx.pnp_mats[pi], s("pnp_measure").random(N), fault, haar)
        # no photon but a dark click: the untouched ancilla goes out
        idle = np.where(fault[:, None], haar, ctx.pnp_mats[pi][:, :, 0])
        out = np.where(present[:, None], out, idle)
        diag = np.where(present, diag, s("pnp_dark_outcome").integers(0, 2, N))
        proceeds = present | dark_b
        diag = np.where(proceeds, diag, -1)
        phi = out
        if cfg.bob_schedule is not None:
            bsched = cfg.bob_schedule
            b_lab = s("bob_intensity").choice(len(bsched.labels), N, p=bsched.probs)
            n_out = s("bob_photons").poisson(bsched.mus[b_lab])
            b_signal = b_lab == bsched.signal_index
        else:
            b_lab = np.full(N, -1)
            n_out = np.ones(N, dtype=int)
            b_signal = np.ones(N, dtype=bool)
        n_out = np.where(proceeds, n_out, 0)
        b_lab = np.where(proceeds, b_lab, -1)
        probes_back = np.zeros(N, dtype=int)
    else:
        proceeds = np.ones(N, dtype=bool)
        phi = psi
        n_out = n_b
        b_lab = np.full(N, -1)
        b_signal = np.ones(N, dtype=bool)
        probes_back = np.full(N, k_probe)

    # Bob: encoding and basis choice
    op = s("bob_op").integers(0, K, N)
    mats = ctx.op_stack[op]
    phi = np.einsum("nij,nj->ni", mats, phi)
    coin = s("bob_coin").integers(0, nb, N)
    if cfg.basis_chooser == "eve" or not cfg.delegate_measurement:
        m_b = s("measure_basis").integers(0, nb, N)
    else:
        m_b = np.where(ctx.unique_target[op] >= 0, ctx.unique_target[op], coin)

    # Eve's operator guess from the probes (PNA)
    op_guess = np.full(N, -1)
    if isinstance(attack, adv.PnaAttack):
        if cfg.pnp_enabled:
            # nothing came back: blind uniform guess
            op_guess = s("eve_guess").integers(0, K, N)
        else:
            held = np.einsum("nij,nj->ni", mats, np.broadcast_to(ctx.probes[0], (N, 2)))
            for j in range(1, k_probe):
                pj = np.einsum("nij,nj->ni", mats, np.broadcast_to(ctx.probes[j], (N, 2)))
                held = np.einsum("ni,nj->nij", held, pj).reshape(N, -1)
            op_guess = ctx.discriminator.guess(held, s("eve_guess").random(N))

    # Bob -> measuring party
    link = cfg.measurement_link
    n_e = s("link_loss").binomial(n_out, link.transmittance)
    branch2 = depolarizing_branches(link.depolarizing, s("link_depolarize").random(N))
    phi = np.einsum("nij,nj->ni", _PAULIS[branch2], phi)
    used = m_b
    if isinstance(attack, adv.MeasurementCheat) and attack.mode is adv.CheatMode.WRONG_BASIS:
        used = (m_b + 1) % nb
    p0 = np.clip(np.abs(np.einsum("ni,ni->n", ctx.basis_mats[used, :, 0].conj(), phi)) ** 2, 0.0, 1.0)
    outcome = _measure_photons(n_e, p0, s, link.dark_count)
    if isinstance(attack, adv.MeasurementCheat) and attack.mode is adv.CheatMode.CONSTANT:
        outcome = np.where(outcome >= 0, attack.constant, -1)

    # sifting
    lost = ~proceeds | (outcome < 0)
    decoy = ~a_signal | ~b_signal
    pnp_bad = cfg.pnp_enabled & (pnp_b != a_b)
    basis_bad = ~ctx.sift_keep[op, a_b, m_b]
    sifted = ~lost & ~decoy & ~pnp_bad & ~basis_bad
    sample = sifted & (s("sample").random(N) < cfg.error_sample_fraction)
    verdict = np.full(N, _VERDICT_CODES.index(Verdict.KEEP))
    verdict[sample] = _VERDICT_CODES.index(Verdict.ERROR_SAMPLE)
    verdict[basis_bad] = _VERDICT_CODES.index(Verdict.DISCARD_BASIS)
    verdict[pnp_bad] = _VERDICT_CODES.index(Verdict.DISCARD_PNP)
    verdict[decoy] = _VERDICT_CODES.index(Verdict.DECOY)
    verdict[lost] = _VERDICT_CODES.index(Verdict.LOST)

    # decoding
    o = np.clip(outcome, 0, 1)
    cls = ctx.class_ids[op]
    if cfg.delegate_measurement:
        alice_bit = ctx.alice_table[cls, a_b, a_i, m_b, o]
        bob_bit = ctx.bob_table[op, a_b, m_b]
    else:
        alice_bit, bob_bit = a_i.copy(), o.copy()
    alice_bit = np.where(sifted, alice_bit, -1)
    bob_bit = np.where(sifted, bob_bit, -1)

    # Eve's key-bit guess
    eve_bit = s("eve_coin").integers(0, 2, N)
    if isinstance(attack, adv.InterceptResend):
        if cfg.delegate_measurement:
            guess = ctx.alice_table[cls, a_b, np.clip(ir_out, 0, 1), m_b, o]
        else:
            guess = np.clip(ir_out, 0, 1)
        eve_bit = np.where((ir_basis == a_b) & (guess >= 0), guess, eve_bit)
    elif isinstance(attack, adv.PnsAttack):
        if cfg.delegate_measurement:
            guess = ctx.alice_table[cls, a_b, a_i, m_b, o]
        else:
            guess = a_i
        eve_bit = np.where(eve_copy & (guess >= 0), guess, eve_bit)
    elif isinstance(attack, adv.PnaAttack):
        guess = ctx.bob_table[np.clip(op_guess, 0, K - 1), a_b, m_b]
        eve_bit = np.where((op_guess >= 0) & (guess >= 0), guess, eve_bit)

    return {
        "alice_basis": a_b,
        "alice_index": a_i,
        "alice_intensity": a_lab,
        "alice_photons": n_a,
        "alice_signal": a_signal,
        "bob_proceeds": proceeds,
        "pnp_basis": pnp_b,
        "pnp_diagnostic": diag,
        "operator": op if cfg.delegate_measurement else np.full(N, -1),
        "bob_intensity": b_lab,
        "bob_photons": n_out,
        "measurement_basis": m_b,
        "outcome": outcome,
        "verdict": verdict,
        "alice_bit": alice_bit,
        "bob_bit": bob_bit,
        "eve_bit": eve_bit,
        "op_guess": op_guess,
        "op_true": op,
        "probes_back": probes_back,
        "pnp_bad": pnp_bad,
        "sifted": sifted,
        "sample": sample,
    }


def _decoy_block(cfg: ProtocolConfig, t: dict) -> dict:
    block = {}
    sched = cfg.alice_schedule
    alice = GainYieldStats.empty(sched)
    clicked = t["bob_proceeds"] if cfg.pnp_enabled else t["outcome"] >= 0
    alice.record(t["alice_intensity"], t["alice_photons"], clicked)
    block["alice"] = _stats_summary(alice, cfg.decoy_ratio)
    if cfg.bob_schedule is not None:
        bob = GainYieldStats.empty(cfg.bob_schedule)
        emitted = t["bob_proceeds"]
        bob.record(t["bob_intensity"][emitted], t["bob_photons"][emitted], (t["outcome"] >= 0)[emitted])
        block["bob"] = _stats_summary(bob, cfg.decoy_ratio)
    return block


def _stats_summary(stats: GainYieldStats, ratio: float) -> dict:
    out = {
        "intensities": stats.to_rows(),
        "true_y1": stats.true_yield(1),
        "check": None,
    }
    if {"signal", "decoy"} <= set(stats.labels):
        try:
            out["check"] = check_consistency(stats, ratio).as_dict()
        except InsufficientCounts as exc:
            out["check"] = {"error": str(exc)}
    out["_stats"] = stats
    return out


def run_session(config: ProtocolConfig) -> SessionReport:
    """Execute all rounds and aggregate the session statistics.

    Rounds are processed in fixed chunks, each with its own random streams
    keyed by (seed, session id, chunk index), so results do not depend on
    the thread count.
    """
    ctx = _Context(config)
    sizes = [min(CHUNK, config.rounds - c * CHUNK) for c in range(-(-config.rounds // CHUNK))]
    jobs = list(enumerate(sizes))
    if config.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            parts = list(pool.map(lambda j: _simulate_chunk(ctx, *j), jobs))
    else:
        parts = [_simulate_chunk(ctx, *j) for j in jobs]
    t = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return _report(config, ctx, t)


def _report(cfg: ProtocolConfig, ctx: _Context, t: dict) -> SessionReport:
    N = cfg.rounds
    sifted, sample = t["sifted"], t["sample"]
    raw = sifted & ~sample
    kept = int(sifted.sum())

    def err_rate(mask):
        if not mask.any():
            return None
        return float(np.mean(t["alice_bit"][mask] != t["bob_bit"][mask]))

    qber = err_rate(sample)
    sift_fraction = kept / N
    raw_bits = int(raw.sum())
    alice_signal = int(t["alice_signal"].sum())
    guessed = t["op_guess"] >= 0
    conclusive = raw & guessed
    verdict_counts = {v.value: int(c) for v, c in zip(_VERDICT_CODES, np.bincount(t["verdict"], minlength=len(_VERDICT_CODES)))}

    pnp = None
    if cfg.pnp_enabled:
        detected_signal = t["bob_proceeds"] & t["alice_signal"]
        pnp = {
            "wrongly_purified": int((t["pnp_bad"] & detected_signal).sum()),
            "alice_signal_detected": int(detected_signal.sum()),
            "gate_fidelity": cfg.gate_fidelity,
            "control_policy": cfg.control_policy.value,
        }

    decoy = _decoy_block(cfg, t) if cfg.practical else None
    if qber is None:
        rate = None
    else:
        rate = asymptotic_key_rate(min(qber, 0.5), sift_fraction) if qber <= 0.5 else 0.0

    labels = {
        "bases": ctx.catalog.basis_labels,
        "ops": ctx.catalog.labels,
        "alice_int": cfg.alice_schedule.labels if cfg.practical else ["signal"],
        "bob_int": cfg.bob_schedule.labels if cfg.bob_schedule is not None else None,
    }
    return SessionReport(
        rounds_total=N,
        lost_count=int((t["verdict"] == _VERDICT_CODES.index(Verdict.LOST)).sum()),
        kept_count=kept,
        error_sample_count=int(sample.sum()),
        raw_key_bits=raw_bits,
        sift_fraction=sift_fraction,
        qber=qber,
        sifted_error_rate=err_rate(sifted),
        eve_guess_rate=float(np.mean(t["eve_bit"][raw] == t["bob_bit"][raw])) if raw_bits else None,
        eve_operator_guesses=int(guessed.sum()),
        eve_operator_correct=int((guessed & (t["op_guess"] == t["op_true"])).sum()),
        eve_probes_returned=int(t["probes_back"].sum()),
        eve_conclusive_rounds=int(conclusive.sum()),
        eve_conclusive_guess_rate=float(np.mean(t["eve_bit"][conclusive] == t["bob_bit"][conclusive])) if conclusive.any() else None,
        alice_signal_pulses=alice_signal,
        qubits_per_raw_bit=alice_signal / raw_bits if raw_bits else None,
        asymptotic_key_rate=rate,
        verdict_counts=verdict_counts,
        pnp=pnp,
        decoy=decoy,
        _trace=t if cfg.trace else None,
        _labels=labels,
    )


def with_overrides(config: ProtocolConfig, **changes) -> ProtocolConfig:
    return replace(config, **changes)
