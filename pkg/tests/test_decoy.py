import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdiqkd.decoy import (
    STANDARD_MDI_QUBITS_PER_BIT,
    ChannelModel,
    GainYieldStats,
    InsufficientCounts,
    Intensity,
    IntensitySchedule,
    check_consistency,
    depolarizing_branches,
    detect,
    estimate_y1_lower_bound,
    qubits_per_raw_bit,
    run_decoy_experiment,
    sample_photon_number,
    transmit,
    weak_coherent_pulse,
)
from mdiqkd.pnp import Provenance, Pulse
from mdiqkd.protocol import ProtocolConfig, run_session
from mdiqkd.qmath import PLUS, ZERO, RandomStream


def sigma(p, n):
    return np.sqrt(p * (1 - p) / n)


def test_photon_number_statistics():
    rng = RandomStream(1)
    assert all(sample_photon_number(0.0, rng) == 0 for _ in range(100))
    draws = np.array([sample_photon_number(0.5, rng) for _ in range(20_000)])
    p0 = np.exp(-0.5)
    p2 = 1 - np.exp(-0.5) * 1.5
    assert abs(np.mean(draws == 0) - p0) < 3 * sigma(p0, 20_000)
    assert abs(np.mean(draws >= 2) - p2) < 3 * sigma(p2, 20_000)
    with pytest.raises(ValueError):
        sample_photon_number(-1.0, rng)


def test_weak_coherent_pulse_shares_state():
    rng = RandomStream(3)
    for _ in range(200):
        pulse = weak_coherent_pulse(PLUS, 2.0, rng)
        assert len(pulse) <= 3
        assert all(p == PLUS for p in pulse.photons)
        assert all(t is Provenance.FROM_ALICE for t in pulse.tags)


def test_transmit_identity_and_depolarizing():
    rng = RandomStream(4)
    pulse = Pulse((ZERO, PLUS), (Provenance.FROM_ALICE,) * 2)
    assert transmit(pulse, ChannelModel(), rng) == pulse
    changed = sum(
        not transmit(Pulse.single(ZERO), ChannelModel(depolarizing=1.0), rng).photons[0].equiv(ZERO)
        for _ in range(4000)
    )
    # X and Y flip |0>, Z only adds a phase: 2 of 4 Pauli branches change the ray
    assert abs(changed / 4000 - 0.5) < 3 * sigma(0.5, 4000)
    assert not detect(Pulse(), ChannelModel(), rng)
    assert detect(Pulse(), ChannelModel(dark_count=1.0), rng)


def test_depolarizing_branch_weights():
    u = np.random.default_rng(5).random(200_000)
    counts = np.bincount(depolarizing_branches(0.4, u), minlength=4) / len(u)
    expect = np.array([0.7, 0.1, 0.1, 0.1])
    assert (np.abs(counts - expect) < 3 * sigma(expect, len(u))).all()
    assert (depolarizing_branches(0.0, u) == 0).all()


def test_gain_poisson_thinning():
    n = 200_000
    stats = run_decoy_experiment(IntensitySchedule.signal_only(0.5), ChannelModel(transmittance=0.2), n,
                                 np.random.default_rng(6))
    q = 1 - np.exp(-0.1)
    assert abs(stats.gain("signal") - q) < 3 * sigma(q, n)
    dark = run_decoy_experiment(IntensitySchedule.signal_only(0.5), ChannelModel(transmittance=0.0, dark_count=0.01),
                                n, np.random.default_rng(7))
    assert abs(dark.gain("signal") - 0.01) < 3 * sigma(0.01, n)


def test_gain_law_across_schedule():
    n = 1_000_000
    ch = ChannelModel(transmittance=0.3, dark_count=1e-3)
    sched = IntensitySchedule.standard()
    stats = run_decoy_experiment(sched, ch, n, np.random.default_rng(8))
    for lab in sched.labels:
        q = 1 - (1 - 1e-3) * np.exp(-0.3 * sched.mu(lab))
        assert abs(stats.gain(lab) - q) < 3 * sigma(q, stats.count(lab))
    assert abs(stats.gain("vacuum") - 1e-3) < 3 * sigma(1e-3, stats.count("vacuum"))


def test_honest_y1_bound():
    stats = run_decoy_experiment(IntensitySchedule.standard(), ChannelModel(transmittance=0.2), 1_000_000,
                                 np.random.default_rng(9))
    y1 = estimate_y1_lower_bound(stats)
    assert y1 <= stats.true_yield(1)
    assert y1 >= 0.2 - 0.03
    assert check_consistency(stats).consistent


def test_pns_blocking_flagged():
    stats = run_decoy_experiment(IntensitySchedule.standard(), ChannelModel(transmittance=0.2), 1_000_000,
                                 np.random.default_rng(10), pns_block=1.0)
    check = check_consistency(stats)
    assert check.y1_lower == 0.0
    assert not check.consistent
    assert stats.true_yield(1) == 0.0


def test_estimator_ignores_ground_truth():
    stats = run_decoy_experiment(IntensitySchedule.standard(), ChannelModel(transmittance=0.2), 200_000,
                                 np.random.default_rng(11))
    blind = GainYieldStats(stats.labels, stats.mus, stats.sent, stats.detected)
    assert estimate_y1_lower_bound(blind) == estimate_y1_lower_bound(stats)


def test_insufficient_counts():
    stats = run_decoy_experiment(IntensitySchedule.standard(), ChannelModel(transmittance=0.2), 50_000,
                                 np.random.default_rng(12))
    with pytest.raises(InsufficientCounts):
        estimate_y1_lower_bound(stats)


def test_schedule_validation():
    with pytest.raises(ValueError):
        IntensitySchedule.standard(probs=(0.5, 0.4, 0.2))
    with pytest.raises(ValueError):
        IntensitySchedule.standard(signal=0.2, decoy=0.5)
    with pytest.raises(ValueError):
        IntensitySchedule((Intensity("signal", 0.5, 0.9), Intensity("vacuum", 0.1, 0.1)))
    with pytest.raises(ValueError):
        ChannelModel(transmittance=1.5)


@settings(max_examples=50, deadline=None)
@given(seeds=st.lists(st.integers(0, 2**31), min_size=3, max_size=3))
def test_stats_merge_associative_commutative(seeds):
    sched = IntensitySchedule.standard()
    a, b, c = (run_decoy_experiment(sched, ChannelModel(transmittance=0.4), 500, np.random.default_rng(s)) for s in seeds)

    def key(s):
        return (tuple(s.sent), tuple(s.detected), tuple(s.photon_sent), tuple(s.photon_detected))

    assert key(a.merge(b)) == key(b.merge(a))
    assert key(a.merge(b).merge(c)) == key(a.merge(b.merge(c)))


def test_qubits_per_raw_bit():
    rep = run_session(ProtocolConfig(kind="BB84-4", rounds=50_000, seed=13))
    assert qubits_per_raw_bit(rep) == rep.qubits_per_raw_bit
    assert rep.standard_mdi_qubits_per_bit == STANDARD_MDI_QUBITS_PER_BIT == 8

    class Empty:
        raw_key_bits = 0
        alice_signal_pulses = 10

    with pytest.raises(ZeroDivisionError):
        qubits_per_raw_bit(Empty())


def test_bob_side_wrongly_purified_half():
    cfg = ProtocolConfig(
        kind="BB84-4", rounds=200_000, seed=14, pnp_enabled=True,
        channel=ChannelModel(transmittance=0.5),
        alice_schedule=IntensitySchedule.standard(),
        bob_schedule=IntensitySchedule.standard(),
    )
    rep = run_session(cfg)
    n = rep.pnp["alice_signal_detected"]
    assert abs(rep.pnp["wrongly_purified"] / n - 0.5) < 3 * sigma(0.5, n)
    assert set(rep.decoy) == {"alice", "bob"}
    assert rep.decoy["alice"]["check"]["consistent"]
