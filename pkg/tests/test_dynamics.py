import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starkcal.device import QubitSpec, make_device, pair_device
from starkcal.dynamics import (
    QubitState,
    SimOptions,
    analytic_stark_shift,
    approx_stark_shift,
    coherence_factor,
    dressed_splitting_oracle,
    measure,
    rabi_visibility,
    readout_probability,
    rotation,
    simulate,
    stable_dt,
)
from starkcal.errors import ResonantDetuningError, RWAError, StepSizeError
from starkcal.pulses import ControlPulse, Envelope, ResolvedTone

QUBIT = QubitSpec(0, 6.2497, 45.0, 30.0, 12.0, 33.3)


def _tone(omega, delta, start, stop, shape="square", phase=0.0):
    """Tone that reaches QUBIT with Rabi frequency omega (MHz) and detuning delta = f_q - f_drive."""
    env = Envelope(shape, stop - start, omega / QUBIT.rabi_scale, phase)
    return ResolvedTone(QUBIT.frequency - delta * 1e-3, env, start)


def echo_phase(omega, delta, tau_us, method="rk4", dt=0.1):
    """Azimuth picked up during an echo whose second half carries an off-resonant tone."""
    tau = tau_us * 1e3
    pulses = [ControlPulse(0.0, math.pi / 2, 0.0), ControlPulse(tau, math.pi, math.pi / 2)]
    tones = [_tone(omega, delta, tau, 2 * tau)] if omega else []
    s = simulate(tones, QUBIT, 2 * tau, pulses, SimOptions(dt=dt), method=method)
    return cmath.phase(s.excited * s.ground.conjugate())


def echo_slope(omega, delta, method="rk4"):
    """Regression slope of the unwrapped echo phase against tau, rad/us."""
    shift = analytic_stark_shift(omega, delta)
    taus = np.arange(1, 9) * 0.8 / (2 * math.pi * abs(shift))
    ref = echo_phase(0, delta, 1.0)
    phases = np.unwrap([echo_phase(omega, delta, t, method) - ref for t in taus])
    return np.polyfit(taus, phases, 1)[0]


# --- Stark shift formulas ----------------------------------------------------------


def test_stark_examples():
    assert analytic_stark_shift(0.0, 22.1) == 0
    assert analytic_stark_shift(5.0, 22.1) == pytest.approx(0.558, abs=1e-3)  # quoted to three digits (0.5586)
    assert analytic_stark_shift(5.0, -22.1) == -analytic_stark_shift(5.0, 22.1)
    assert approx_stark_shift(5.0, 22.1) == pytest.approx(0.5656, abs=5e-5)
    assert approx_stark_shift(0.0, 22.1) == 0
    with pytest.raises(ResonantDetuningError):
        analytic_stark_shift(1.0, 0.0)
    with pytest.raises(ResonantDetuningError):
        approx_stark_shift(1.0, np.array([1.0, 0.0]))


def test_oracle_examples():
    assert dressed_splitting_oracle(5.0, 22.1) == pytest.approx(analytic_stark_shift(5.0, 22.1), rel=1e-10)
    assert dressed_splitting_oracle(7.0, 7.0) == pytest.approx((math.sqrt(2) - 1) * 7.0, rel=1e-12)
    assert dressed_splitting_oracle(7.0, -7.0) == pytest.approx(-(math.sqrt(2) - 1) * 7.0, rel=1e-12)
    assert abs(dressed_splitting_oracle(5.0, 1e9)) < 1e-7
    assert dressed_splitting_oracle(3.0, 0.0) == pytest.approx(3.0)


def test_oracle_is_independent_of_closed_form():
    # eigenvalues of the drive-frame Hamiltonian computed by LAPACK
    for omega, delta in [(5.0, 22.1), (40.0, -3.0), (0.3, 480.0)]:
        lam = np.linalg.eigvalsh(np.array([[0, omega / 2], [omega / 2, delta]]))
        upper = lam[1] if delta > 0 else lam[0]
        assert 2 * (upper - delta) == pytest.approx(dressed_splitting_oracle(omega, delta), rel=1e-9)


@settings(max_examples=200, deadline=None)
@given(omega=st.floats(0, 50), delta=st.floats(1, 500), sign=st.sampled_from([-1, 1]))
def test_oracle_matches_analytic(omega, delta, sign):
    a = analytic_stark_shift(omega, sign * delta)
    o = dressed_splitting_oracle(omega, sign * delta)
    assert abs(a - o) <= 1e-10 * max(abs(a), 1e-300)


def test_weak_drive_limit():
    delta = 100.0
    for omega in (0.01, 0.1, 1.0):
        a = analytic_stark_shift(omega, delta)
        assert a == pytest.approx(approx_stark_shift(omega, delta), rel=(omega / delta) ** 2)


def test_rabi_visibility():
    assert rabi_visibility(4.0, 4.0) == 0.5
    assert rabi_visibility(1.0, 10.0) == pytest.approx(0.01, rel=0.02)
    assert rabi_visibility(1.0, 0.0) == 1
    # the Stark shift is first order in the leak amplitude, the visibility second order
    assert rabi_visibility(0.5, 22.1) < abs(analytic_stark_shift(0.5, 22.1)) / 22.1 * 10


# --- propagation -------------------------------------------------------------------


def test_rotation_is_unitary():
    u = rotation(1.1, 0.3)
    assert np.allclose(u @ u.conj().T, np.eye(2))
    assert np.allclose(rotation(math.pi, 0.0), [[0, -1j], [-1j, 0]])


def test_two_quarter_pulses_invert():
    pulses = [ControlPulse(0.0, math.pi / 2, 0.0), ControlPulse(3000.0, math.pi / 2, 0.0)]
    s = simulate([], QUBIT, 3000.0, pulses)
    assert s.excited_population() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("method", ["rk4", "exact"])
def test_resonant_pi_pulse(method):
    omega = 10.0  # 50 ns square pulse gives area pi
    s = simulate([_tone(omega, 0.0, 0.0, 50.0)], QUBIT, 50.0, method=method, opts=SimOptions(dt=0.05))
    assert s.excited_population() == pytest.approx(1.0, abs=1e-6)


def test_cosine_pi_pulse_matches_rotation():
    # a 30 ns cosine envelope at amplitude 1 and rabi scale 1000/30 MHz has area pi
    q = QubitSpec(0, 6.0, 45.0, 30.0, 12.0, 1000 / 30)
    tone = ResolvedTone(6.0, Envelope("cosine", 30.0, 1.0, 0.4), 0.0)
    s = simulate([tone], q, 30.0, opts=SimOptions(dt=0.01))
    g, e = rotation(math.pi, 0.4) @ np.array([1, 0])
    assert abs(s.ground - g) < 1e-8 and abs(s.excited - e) < 1e-8


def test_rk4_matches_exact_square_tone():
    pulses = [ControlPulse(0.0, math.pi / 2, 0.0)]
    tones = [_tone(6.0, -22.1, 100.0, 900.0, phase=0.7)]
    a = simulate(tones, QUBIT, 1000.0, pulses, SimOptions(dt=0.05), method="rk4")
    b = simulate(tones, QUBIT, 1000.0, pulses, method="exact")
    assert abs(a.ground - b.ground) < 1e-8 and abs(a.excited - b.excited) < 1e-8


def test_convergence_under_step_halving():
    pulses = [ControlPulse(0.0, math.pi / 2, 0.0)]
    tones = [_tone(5.0, 22.1, 0.0, 600.0, shape="cosine"), _tone(3.0, -40.0, 100.0, 400.0)]
    prev = None
    for dt in (0.2, 0.1, 0.05):
        s = simulate(tones, QUBIT, 600.0, pulses, SimOptions(dt=dt))
        assert s.norm_drift < 1e-8
        if prev is not None:
            assert abs(s.excited - prev.excited) < 1e-6
        prev = s


def test_step_size_precondition():
    tones = [_tone(2.0, 300.0, 0.0, 10.0)]
    with pytest.raises(StepSizeError):
        simulate(tones, QUBIT, 10.0, opts=SimOptions(dt=0.1))
    dt = stable_dt(tones, QUBIT)
    simulate(tones, QUBIT, 10.0, opts=SimOptions(dt=dt))


def test_rwa_rejected():
    with pytest.raises(RWAError):
        simulate([_tone(1.0, 1500.0, 0.0, 10.0)], QUBIT, 10.0, opts=SimOptions(dt=1e-4))


def test_echo_phase_example():
    slope = echo_slope(2.0, 22.1)
    expected = 2 * math.pi * dressed_splitting_oracle(2.0, 22.1)
    assert abs(slope) == pytest.approx(abs(expected), rel=0.02)


def test_echo_phase_sign_follows_detuning():
    a = echo_slope(2.0, 22.1, method="exact")
    b = echo_slope(2.0, -22.1, method="exact")
    assert a * b < 0


# --- readout -----------------------------------------------------------------------


def test_measure_examples():
    q = QubitSpec(0, 6.0, 1e6, 1e6, 1e6, 30.0)
    assert measure(QubitState(0j, 1 + 0j), "echo", 0.0, q, SimOptions(shots=10**6)) == 1.0
    # contrast at 2 tau = 2 T2E
    for pop in (0.0, 1.0):
        p = readout_probability(pop, "echo", 2 * QUBIT.t2_echo, QUBIT)
        assert p - 0.5 == pytest.approx((pop - 0.5) * math.exp(-2))
    assert coherence_factor("ramsey", QUBIT.t2_ramsey, QUBIT) == pytest.approx(math.exp(-1))


def test_measure_shot_noise():
    s = QubitState(1 / math.sqrt(2), 1 / math.sqrt(2))
    rng = np.random.default_rng(5)
    vals = [measure(s, "none", 0.0, QUBIT, SimOptions(shots=1000, rng=rng)) for _ in range(200)]
    sigma = math.sqrt(0.25 / 1000)
    assert all(abs(v - 0.5) < 4 * sigma for v in vals)
    assert abs(np.mean(vals) - 0.5) < 3 * sigma / math.sqrt(200)


def test_spam_error():
    assert readout_probability(1.0, "none", 0.0, QUBIT, 0.03) == pytest.approx(0.97)
    assert readout_probability(0.0, "none", 0.0, QUBIT, 0.03) == pytest.approx(0.03)


def test_state_validation():
    with pytest.raises(ValueError):
        QubitState(1 + 0j, 1 + 0j)
    with pytest.raises(ValueError):
        SimOptions(dt=0.0)


def test_device_sequence_runs():
    from starkcal.device import Phasor
    from starkcal.dynamics import measure_sequence
    from starkcal.pulses import build_echo_scan_sequence

    d = pair_device()
    seq = build_echo_scan_sequence(0, 1, 0.5, 0.5, 0.0, Phasor.zero(), d)
    p = measure_sequence(seq, d, SimOptions())
    assert 0 <= p <= 1
    d0 = make_device([6.2497, 6.2718])
    assert measure_sequence(build_echo_scan_sequence(0, 1, 0.5, 0.5, 0.0, Phasor.zero(), d0), d0, SimOptions()) == pytest.approx(
        0.5 * (1 + math.exp(-1.0 / d0.qubit(0).t2_echo)) * (1 - 2 * d0.spam_error) + d0.spam_error
    )
