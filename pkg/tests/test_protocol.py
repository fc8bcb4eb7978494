import itertools
from collections import Counter

import numpy as np
import pytest

from mdiqkd.common import ConfigError, Verdict
from mdiqkd.decoy import ChannelModel
from mdiqkd.opsets import CodingScheme, basis_image, build_catalog, default_coding
from mdiqkd.protocol import (
    DEFER_TO_EVE,
    ProtocolConfig,
    Round,
    alice_prepare,
    asymptotic_key_rate,
    binary_entropy,
    bob_choose,
    decode_alice,
    decode_bob,
    estimate_qber,
    run_session,
    sift,
)
from mdiqkd.qmath import RandomStream

N = 100_000
KINDS = [("BB84-4", None), ("BB84-8", None), ("SixState-24", None), ("General-12", np.pi / 6)]
PAULIS = [np.eye(2), np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.diag([1, -1])]


def sigma(p, n):
    return np.sqrt(p * (1 - p) / n)


def rnd(a, i, op, m, o, verdict=Verdict.KEEP):
    return Round(0, a, i, op, None, m, o, verdict)


def test_alice_prepare_uniform():
    for kind, theta, n_states in [("BB84-4", None, 4), ("SixState-24", None, 6), ("General-12", 0.3, 4)]:
        cat = build_catalog(kind, theta)
        rng = RandomStream(1)
        n = 12_000
        counts = Counter(alice_prepare(cat, rng)[:2] for _ in range(n))
        assert len(counts) == n_states
        p = 1 / n_states
        assert all(abs(c / n - p) < 3 * sigma(p, n) for c in counts.values())
    b, i, state = alice_prepare(build_catalog("General-12", 0.3), RandomStream(2))
    assert state.equiv(build_catalog("General-12", 0.3).basis(b).vectors[i])


def test_bob_choose_rules():
    gen = build_catalog("General-12", 0.4)
    rng = RandomStream(3)
    seen = Counter()
    for _ in range(6000):
        op, basis = bob_choose(gen, rng)
        seen[op] += 1
        if op in ("X", "Z", "XU", "ZU"):
            assert basis == "Z"
        elif op in ("UX", "UZ", "UXU", "UZU"):
            assert basis == "G"
        else:
            assert basis in ("Z", "G")
    assert len(seen) == 12
    bb4 = build_catalog("BB84-4")
    assert all(bob_choose(bb4, rng)[1] is DEFER_TO_EVE for _ in range(20))


def test_bob_choose_coin_is_fair():
    gen = build_catalog("General-12", 0.4)
    rng = RandomStream(4)
    picks = [b for op, b in (bob_choose(gen, rng) for _ in range(20_000)) if op in ("I", "U", "XZ", "UXZ")]
    frac = np.mean([b == "Z" for b in picks])
    assert abs(frac - 0.5) < 3 * sigma(0.5, len(picks))


def test_sift_examples():
    assert sift(build_catalog("BB84-4"), "Z", "H", "Z") is Verdict.DISCARD_BASIS
    assert sift(build_catalog("SixState-24"), "Z", "H2X", "Z") is Verdict.KEEP
    assert sift(build_catalog("General-12", 0.5), "Z", "ZU", "Z") is Verdict.DISCARD_BASIS


def test_bb84_announcement_rule_equals_basis_image_rule():
    cat = build_catalog("BB84-4")
    for a, op, m in itertools.product("ZX", cat.labels, "ZX"):
        by_image = basis_image(cat, op, a) == m
        assert (sift(cat, a, op, m) is Verdict.KEEP) == by_image


def test_decode_examples():
    bb4 = build_catalog("BB84-4")
    assert decode_alice(rnd("Z", 0, "X", "Z", 1), bb4) == 1
    assert decode_alice(rnd("X", 1, "Z", "X", 0), bb4) == 0
    assert decode_alice(rnd("Z", 1, "HXZ", "X", 0), bb4) == 1
    assert decode_bob(rnd("Z", 0, "Z", "Z", 0), bb4) == 0
    bb8 = build_catalog("BB84-8")
    assert decode_bob(rnd("Z", 0, "XZ", "Z", 0), bb8) == 1
    six = build_catalog("SixState-24")
    assert decode_bob(rnd("Z", 0, "H2Z", "Z", 0), six) == 0


def test_decode_alice_inconsistent_record_is_error():
    bb4 = build_catalog("BB84-4")
    # H class maps Z to X, so no class member explains a (Z, Z) record
    assert decode_alice(rnd("Z", 0, "H", "Z", 0), bb4) is None


def test_bb84_consistent_set_unique():
    cat = build_catalog("BB84-4")
    coding = default_coding(cat)
    for a, i, m, o in itertools.product("ZX", range(2), "ZX", range(2)):
        for cls_members in (("Z", "X"), ("H", "HXZ")):
            kept = [op for op in cls_members if sift(cat, a, op, m) is Verdict.KEEP]
            if not kept:
                continue
            psi = cat.basis(a).vectors[i].amplitudes
            seen = cat.basis(m).vectors[o].amplitudes
            consistent = [op for op in kept if abs(np.vdot(seen, cat.matrix(op) @ psi)) ** 2 > 0.5]
            assert len(consistent) == 1
            assert decode_alice(rnd(a, i, consistent[0], m, o), cat, coding) == decode_bob(
                rnd(a, i, consistent[0], m, o), cat, coding
            )


@pytest.mark.parametrize("kind,theta,expect", [
    ("BB84-4", None, 0.5), ("BB84-8", None, 0.5), ("SixState-24", None, 1 / 3), ("General-12", np.pi / 6, 0.5),
])
def test_sift_fraction_laws(kind, theta, expect):
    rep = run_session(ProtocolConfig(kind=kind, theta=theta, rounds=N, seed=5))
    assert abs(rep.sift_fraction - expect) < 3 * sigma(expect, N)
    assert rep.sift_fraction == rep.kept_count / rep.rounds_total
    assert rep.qber == 0.0


@pytest.mark.parametrize("kind,theta", KINDS)
def test_engine_agrees_with_scalar_rules(kind, theta):
    cfg = ProtocolConfig(kind=kind, theta=theta, rounds=3000, seed=6, trace=True)
    rep = run_session(cfg)
    cat = cfg.catalog
    coding = cfg.coding_scheme
    for r in rep.rounds():
        if r.sift_verdict in (Verdict.KEEP, Verdict.ERROR_SAMPLE):
            assert sift(cat, r.alice_basis, r.bob_operator, r.measurement_basis) is Verdict.KEEP
            assert r.alice_bit == decode_alice(r, cat, coding)
            assert r.bob_bit == decode_bob(r, cat, coding)
            assert r.alice_bit == r.bob_bit
        else:
            assert r.alice_bit is None and r.bob_bit is None
            assert r.sift_verdict is Verdict.DISCARD_BASIS
            assert sift(cat, r.alice_basis, r.bob_operator, r.measurement_basis) is Verdict.DISCARD_BASIS


def test_round_invariants_with_pnp():
    rep = run_session(ProtocolConfig(kind="SixState-24", rounds=5000, seed=7, pnp_enabled=True, trace=True))
    for r in rep.rounds():
        if r.sift_verdict is Verdict.DISCARD_PNP:
            assert r.pnp_basis != r.alice_basis
        assert (r.alice_bit is not None) == (r.sift_verdict in (Verdict.KEEP, Verdict.ERROR_SAMPLE))


def test_qber_only_from_error_sample():
    rep = run_session(ProtocolConfig(
        kind="BB84-4", rounds=20_000, seed=8, channel=ChannelModel(depolarizing=0.3), trace=True))
    rounds = rep.rounds()
    sample = [r for r in rounds if r.sift_verdict is Verdict.ERROR_SAMPLE]
    assert rep.qber == estimate_qber(sample)
    assert rep.error_sample_count == len(sample)
    assert rep.raw_key_bits == sum(r.sift_verdict is Verdict.KEEP for r in rounds)
    assert estimate_qber([]) is None


def test_eve_outcome_uncorrelated_with_key():
    rep = run_session(ProtocolConfig(kind="BB84-4", rounds=N, seed=9, trace=True))
    t = rep.trace
    kept = t["sifted"]
    for a, m, o in itertools.product(range(2), range(2), range(2)):
        sel = kept & (t["alice_basis"] == a) & (t["measurement_basis"] == m) & (t["outcome"] == o)
        n = int(sel.sum())
        frac = t["bob_bit"][sel].mean()
        assert abs(frac - 0.5) < 3 * sigma(0.5, n)


def depolarizing_oracle(kind, p):
    """Exact QBER through a Pauli channel by enumerating every Kraus branch."""
    cat = build_catalog(kind)
    coding = default_coding(cat)
    weights = [1 - 3 * p / 4, p / 4, p / 4, p / 4]
    err = kept = 0.0
    for a, i, (w_k, pauli), op, m in itertools.product(cat.bases, range(2), zip(weights, PAULIS), cat.labels, cat.bases):
        if sift(cat, a.label, op, m.label) is not Verdict.KEEP:
            continue
        out = cat.matrix(op) @ pauli @ a.vectors[i].amplitudes
        for o in range(2):
            w = w_k * abs(np.vdot(m.vectors[o].amplitudes, out)) ** 2
            r = rnd(a.label, i, op, m.label, o)
            alice = decode_alice(r, cat, coding)
            kept += w
            err += w * (alice != decode_bob(r, cat, coding))
    return err / kept


@pytest.mark.parametrize("kind", ["BB84-4", "SixState-24"])
def test_depolarizing_qber_matches_kraus_enumeration(kind):
    expect = depolarizing_oracle(kind, 0.1)
    assert expect == pytest.approx(0.05, abs=1e-12)
    rep = run_session(ProtocolConfig(kind=kind, rounds=N, seed=10, channel=ChannelModel(depolarizing=0.1),
                                     error_sample_fraction=0.5))
    assert abs(rep.qber - expect) < 3 * sigma(expect, rep.error_sample_count)


def test_asymptotic_key_rate():
    assert asymptotic_key_rate(0.0, 0.5) == 0.5
    assert asymptotic_key_rate(0.25, 0.5) == 0.0
    h = -0.11 * np.log2(0.11) - 0.89 * np.log2(0.89)
    assert asymptotic_key_rate(0.11, 0.5) == pytest.approx(0.5 * max(0.0, 1 - 2 * h), abs=1e-15)
    assert binary_entropy(0.5) == 1.0
    with pytest.raises(ValueError):
        asymptotic_key_rate(0.6, 0.5)


def test_thread_count_does_not_change_results():
    base = dict(kind="SixState-24", rounds=70_000, seed=11, pnp_enabled=True, channel=ChannelModel(depolarizing=0.05))
    one = run_session(ProtocolConfig(**base, threads=1)).as_dict()
    three = run_session(ProtocolConfig(**base, threads=3)).as_dict()
    assert one == three
    other = run_session(ProtocolConfig(**{**base, "seed": 12})).as_dict()
    assert other != one


def test_direct_measurement_mode():
    rep = run_session(ProtocolConfig(kind="BB84-4", rounds=N, seed=13, delegate_measurement=False))
    assert abs(rep.sift_fraction - 0.5) < 3 * sigma(0.5, N)
    assert rep.qber == 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        ProtocolConfig(kind="BB84-8", rounds=10, seed=1, coding="FixedPerOperator")
    with pytest.raises(ConfigError):
        ProtocolConfig(kind="BB84-4", rounds=10, seed=1, error_sample_fraction=0.0)
    with pytest.raises(ConfigError):
        ProtocolConfig(kind="BB84-4", rounds=0, seed=1)
    with pytest.raises(ConfigError):
        ProtocolConfig(kind="General-12", rounds=10, seed=1)
    with pytest.raises(ConfigError):
        ProtocolConfig(kind="BB84-4", rounds=10, seed=1, delegate_measurement=False, pnp_enabled=True)
    with pytest.raises(ValueError):
        ProtocolConfig(kind="BB84-5", rounds=10, seed=1)
    cfg = ProtocolConfig(kind="BB84-8", rounds=10, seed=1)
    assert cfg.coding_scheme == CodingScheme.flip_parity()
    assert ProtocolConfig(kind="General-12", theta=0.2, rounds=10, seed=1).basis_chooser == "bob"


def test_losses_counted_before_sifting():
    rep = run_session(ProtocolConfig(kind="BB84-4", rounds=N, seed=14, channel=ChannelModel(transmittance=0.3)))
    assert abs(rep.lost_count / N - 0.7) < 3 * sigma(0.7, N)
    assert rep.verdict_counts["Lost"] == rep.lost_count
    assert rep.alice_signal_pulses == N
    assert rep.qber == 0.0
