import math

import numpy as np
import pytest
from scipy import stats

from starkcal.device import Phasor, make_device, paper_example_device
from starkcal.dynamics import SimOptions, simulate, stable_dt
from starkcal.errors import MissingCalibrationError
from starkcal.pulses import GATE_NS, GatePulse, build_rb_sequence, effective_mixing, resolve_qubit_drive
from starkcal.rb import (
    DEFAULT_DEPOLARIZING,
    RBResult,
    _pulse_trains,
    _sequences,
    _survival_probabilities,
    clifford_group,
    compose,
    crosstalk_error_reduction,
    fit_rb_decay,
    inverse,
    rb_rows,
    run_rb,
    sample_clifford_sequence,
    summary_rows,
)


def _same_up_to_phase(a, b, tol=1e-10):
    return abs(abs(np.trace(a.conj().T @ b)) - 2) < tol


# --- Clifford group -------------------------------------------------------------------


def test_group_has_24_distinct_elements():
    g = clifford_group()
    assert len(g) == 24
    for i, a in enumerate(g):
        for b in g[i + 1 :]:
            assert not _same_up_to_phase(a.unitary(), b.unitary())


def test_decomposition_lengths():
    lengths = [len(c.decomposition) if c.decomposition != ("I",) else 0 for c in clifford_group()]
    assert max(lengths) == 3
    assert np.mean([len(c.decomposition) for c in clifford_group()]) == pytest.approx(1.875)


def test_closure_and_inverse():
    g = clifford_group()
    for a in g:
        inv = g[inverse(a.index)]
        assert _same_up_to_phase(inv.unitary() @ a.unitary(), np.eye(2))
        for b in g:
            c = g[compose([a.index, b.index])]
            assert _same_up_to_phase(c.unitary(), b.unitary() @ a.unitary())


def test_recovery_of_single_element():
    rng = np.random.default_rng(0)
    seq = sample_clifford_sequence(1, rng)
    assert seq[1].index == inverse(seq[0].index)


def test_sequences_compose_to_identity():
    rng = np.random.default_rng(1)
    for m in (1, 5, 40):
        u = np.eye(2)
        for c in sample_clifford_sequence(m, rng):
            u = c.unitary() @ u
        assert _same_up_to_phase(u, np.eye(2))
    with pytest.raises(ValueError):
        sample_clifford_sequence(0, rng)


def test_sampling_is_uniform():
    rng = np.random.default_rng(2)
    counts = np.zeros(24)
    for _ in range(200):
        for c in sample_clifford_sequence(24, rng)[:-1]:
            counts[c.index] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


# --- decay fits -----------------------------------------------------------------------

LENGTHS = [2, 4, 8, 16, 32, 64, 128, 256, 512]


def test_fit_noiseless():
    m = np.array(LENGTHS, float)
    y = 0.47 * 0.995**m + 0.51
    p, epg, _ = fit_rb_decay(m, y)
    assert p == pytest.approx(0.995, abs=1e-6)
    assert epg == pytest.approx(0.0025, abs=1e-6)
    p, _, _ = fit_rb_decay(m, 0.47 * 0.995**m + 0.5, baseline=0.5)
    assert p == pytest.approx(0.995, abs=1e-9)


def test_fit_table_scale():
    m = np.array(LENGTHS, float)
    p, epg, _ = fit_rb_decay(m, 0.48 * 0.9958**m + 0.5)
    assert round(100 * epg, 2) == 0.21


def test_fit_coverage():
    rng = np.random.default_rng(7)
    m = np.array(LENGTHS, float)
    truth = 0.996
    prob = 0.46 * truth**m + 0.5
    hits = 0
    trials = 100
    for _ in range(trials):
        shots = rng.binomial(1000, prob[:, None], size=(m.size, 30)) / 1000
        p, _, ci = fit_rb_decay(m, shots.mean(axis=1), shots.var(axis=1, ddof=1) / 30)
        hits += abs(p - truth) <= ci
    assert hits >= 0.9 * trials


def test_fit_validation():
    with pytest.raises(ValueError):
        fit_rb_decay([1, 2, 3], [0.9, 0.8, 0.7])
    with pytest.raises(ValueError):
        fit_rb_decay([1, 2, 3, 4], [0.9, 0.8, 0.7])


def test_rbresult_validation():
    with pytest.raises(ValueError):
        RBResult(0, "parallel", [1], [1.0], 0.99, 0.005, 0.001)
    with pytest.raises(ValueError):
        RBResult(0, "separate", [1], [1.0], 0.0, 0.5, 0.001)
    r = RBResult(0, "separate", [1], [1.0], 0.99, 0.005, 0.002)
    assert r.epg_ci == 0.001


# --- reduction ratio ------------------------------------------------------------------


def test_reduction_examples():
    assert crosstalk_error_reduction(0.21, 1.21, 0.32) == pytest.approx(89.0)
    assert crosstalk_error_reduction(0.19, 1.05, 0.26) == pytest.approx(91.86, abs=0.01)
    assert crosstalk_error_reduction(0.2, 0.5, 0.5) == 0
    assert crosstalk_error_reduction(0.2, 0.2, 0.2) is None
    assert crosstalk_error_reduction(0.3, 0.2, 0.25) is None


# --- simulation -----------------------------------------------------------------------


def test_array_path_matches_sequence_path():
    d = paper_example_device()
    c = d.crosstalk.as_array()
    comp = {(j, k): Phasor.from_complex(-0.9 * c[k, j]) for j, k in d.band_pairs()}
    group = [1, 3, 5]
    lengths, n_seq = [2, 3], 2
    seqs = {q: _sequences(d, q, lengths, n_seq) for q in group}
    for mode, table in (("simultaneous_raw", None), ("simultaneous_compensated", comp)):
        mixing = effective_mixing(d, table)
        fast = _survival_probabilities(d, 3, group, mode, lengths, n_seq, mixing, 0.0, 0.1, seqs)
        for i, m in enumerate(lengths):
            for s in range(n_seq):
                trains = _pulse_trains({q: seqs[q][(m, s)] for q in group}, aligned=True)
                gates = {q: [GatePulse(GATE_NS * k, a, ax) for k, (a, ax) in enumerate(t)] for q, t in trains.items()}
                seq = build_rb_sequence(gates, d, table)
                tones = resolve_qubit_drive(seq, 3, d)
                q = d.qubit(3)
                state = simulate(tones, q, seq.duration, opts=SimOptions(dt=stable_dt(tones, q, 0.05)))
                z = state.excited_population()
                eps = d.spam_error
                slow = eps + (1 - 2 * eps) * (1 - z)
                assert fast[i, s] == pytest.approx(slow, abs=1e-6)


def test_ideal_gates_survive():
    d = make_device([5.6, 6.2], rng_seed=4, spam_error=0.0)
    (r,) = run_rb(d, [0], "separate", [1, 2, 4, 8], 4, depolarizing=0.0, sample=False)
    assert np.allclose(r.survival, 1.0, atol=1e-8)


def test_depolarizing_sets_epg():
    d = make_device([5.6, 6.2], rng_seed=4, spam_error=0.0)
    (r,) = run_rb(d, [0], "separate", [1, 2, 4, 8, 16, 32], 10, sample=False)
    # each Clifford carries 1.875 pulses on average
    assert r.epg == pytest.approx((1 - (1 - DEFAULT_DEPOLARIZING) ** 1.875) / 2, rel=0.1)


def test_zero_crosstalk_modes_agree():
    d = make_device([5.60, 5.61, 6.2], bands=["low", "low", "high"], rng_seed=9)
    kw = dict(lengths=[2, 8, 32, 128], sequences_per_length=10)
    sep = run_rb(d, [0, 1], "separate", **kw)
    sim = run_rb(d, [0, 1], "simultaneous_raw", **kw)
    for a, b in zip(sep, sim):
        assert abs(a.epg - b.epg) <= a.epg_ci + b.epg_ci


def test_same_band_leak_raises_error():
    d = make_device([5.600, 5.6055], {(0, 1): (0.08, 40.0), (1, 0): (0.05, -10.0)}, bands=["low", "low"], rng_seed=2)
    kw = dict(lengths=[2, 8, 32, 128], sequences_per_length=10)
    comp = {(1, 0): Phasor.from_polar(0.08, math.radians(40.0 + 180)), (0, 1): Phasor.from_polar(0.05, math.radians(170))}
    sep, raw, cmp_ = (run_rb(d, [0, 1], mode, compensation=comp, **kw)[0] for mode in
                      ("separate", "simultaneous_raw", "simultaneous_compensated"))
    assert raw.epg > 2 * sep.epg
    assert sep.epg <= cmp_.epg < raw.epg
    assert crosstalk_error_reduction(sep.epg, raw.epg, cmp_.epg) > 80


def test_run_rb_is_deterministic():
    d = paper_example_device()
    kw = dict(lengths=[2, 4, 8, 16], sequences_per_length=3)
    a = run_rb(d, [0, 2], "simultaneous_raw", **kw)
    b = run_rb(d, [0, 2], "simultaneous_raw", **kw)
    assert [r.sequence_survival for r in a] == [r.sequence_survival for r in b]


def test_run_rb_validation():
    d = paper_example_device()
    with pytest.raises(MissingCalibrationError):
        run_rb(d, [0], "simultaneous_compensated", [1, 2, 3, 4], 2)
    with pytest.raises(ValueError):
        run_rb(d, [0], "interleaved", [1, 2, 3, 4], 2)
    with pytest.raises(ValueError):
        run_rb(d, [0, 0], "separate", [1, 2, 3, 4], 2)
    with pytest.raises(ValueError):
        run_rb(d, [0], "separate", [4, 2, 8, 16], 2)


def test_export_rows():
    d = make_device([5.6, 6.2], rng_seed=4)
    kw = dict(lengths=[1, 2, 4, 8], sequences_per_length=2)
    results = []
    for mode in ("separate", "simultaneous_raw"):
        results += run_rb(d, [0], mode, **kw)
    rows = rb_rows(results)
    assert len(rows) == 2 * 4 * 2
    assert rows[0][:4] == ["separate", "0", "1", "0"]
    (summary,) = summary_rows(results)
    assert summary[5:] == ["NA", "NA", "NA"]
