"""Single-qubit dynamics in the rotating frame, readout model and Stark-shift formulas.

Conventions: frequencies in MHz (cyclic), times in us for free-evolution
parameters and ns inside sequences. A detuning ``delta`` in the Stark-shift
formulas is ``f_qubit - f_drive``; a positive value (red-detuned drive)
pushes the qubit frequency up. States are stored as (ground, excited)
amplitudes and the drive couples them through ``<e|H|g> = h(t) / 2`` with
``h = rabi_scale * sum_k env_k(t) exp(-i (2 pi Delta_k t + phi_k))``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence as Seq

import numpy as np

from starkcal.device import DeviceModel, QubitSpec
from starkcal.errors import ResonantDetuningError, RWAError, SequenceError, StepSizeError
from starkcal.pulses import ControlPulse, ResolvedTone, Sequence, drive_field, resolve_qubit_drive

DEFAULT_DT = 0.1  # ns
DEFAULT_SHOTS = 1000
STEP_BOUND = 0.1
RWA_LIMIT_MHZ = 1e3
_TWO_PI_PER_NS = 2 * math.pi * 1e-3  # MHz * ns -> rad


@dataclass(frozen=True)
class QubitState:
    ground: complex
    excited: complex
    norm_drift: float = 0.0  # largest per-step norm error seen before renormalisation

    def __post_init__(self):
        if abs(self.norm() - 1) > 1e-9:
            raise ValueError(f"state norm {self.norm()!r} deviates from 1")

    @classmethod
    def ground_state(cls) -> "QubitState":
        return cls(1 + 0j, 0j)

    def norm(self) -> float:
        return math.sqrt(abs(self.ground) ** 2 + abs(self.excited) ** 2)

    def excited_population(self) -> float:
        return abs(self.excited) ** 2

    def azimuth(self) -> float:
        """Equatorial Bloch angle arg(conj(ground) * excited)."""
        return cmath.phase(self.ground.conjugate() * self.excited)

    def as_array(self) -> np.ndarray:
        return np.array([self.ground, self.excited])


@dataclass
class SimOptions:
    dt: float = DEFAULT_DT  # ns
    shots: int = DEFAULT_SHOTS
    rng: np.random.Generator | None = None  # None -> readout returns the exact probability

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.shots < 1:
            raise ValueError(f"shots must be >= 1, got {self.shots}")


# --- Stark shift models -------------------------------------------------------------


def _check_detuning(delta):
    if np.any(np.asarray(delta) == 0):
        raise ResonantDetuningError("zero detuning: the drive is resonant, use the Rabi model instead")


def analytic_stark_shift(omega, delta):
    """AC Stark shift sgn(delta) * (sqrt(omega^2 + delta^2) - |delta|), in MHz.

    Evaluated as omega^2 / (sqrt(omega^2 + delta^2) + |delta|) to keep full
    relative precision when omega << |delta|.
    """
    _check_detuning(delta)
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("Rabi frequency must be >= 0")
    delta = np.asarray(delta, dtype=float)
    out = np.sign(delta) * omega**2 / (np.hypot(omega, delta) + np.abs(delta))
    return out if out.ndim else float(out)


def approx_stark_shift(omega, delta):
    """Weak-drive limit omega^2 / (2 delta)."""
    _check_detuning(delta)
    out = np.asarray(omega, dtype=float) ** 2 / (2 * np.asarray(delta, dtype=float))
    return out if out.ndim else float(out)


def dressed_splitting_oracle(omega, delta):
    """Stark shift obtained from the dressed levels of the drive-frame Hamiltonian.

    Builds H = [[0, omega/2], [omega/2, delta]] on (g, e) and solves the secular
    equation det(H - lam) = 0 for the level continuously connected to |e> by
    Newton iteration on lam - delta. The transition shift is twice that level
    shift (the ground level moves by the same amount the other way). At zero
    detuning this returns omega, the resonant splitting.
    """
    omega = np.asarray(omega, dtype=float)
    delta = np.asarray(delta, dtype=float)
    omega, delta = np.broadcast_arrays(omega, delta)
    h = np.zeros(omega.shape + (2, 2))
    h[..., 0, 1] = h[..., 1, 0] = omega / 2
    h[..., 1, 1] = delta
    coupling_sq = h[..., 0, 1] * h[..., 1, 0]
    gap = h[..., 1, 1] - h[..., 0, 0]
    side = np.where(gap >= 0, 1.0, -1.0)
    # secular equation in x = lam - gap:  x * (gap + x) = coupling^2
    x = side * np.sqrt(coupling_sq)
    for _ in range(200):
        f = x * (gap + x) - coupling_sq
        step = np.divide(f, gap + 2 * x, out=np.zeros_like(f), where=(gap + 2 * x) != 0)
        x_new = x - step
        if np.all(np.abs(x_new - x) <= 4 * np.finfo(float).eps * np.abs(x_new)):
            x = x_new
            break
        x = x_new
    out = 2 * x
    return out if out.ndim else float(out)


def rabi_visibility(omega, delta):
    """Peak excited population of off-resonant Rabi oscillations, omega^2 / (omega^2 + delta^2).

    For omega << |delta| this reduces to (omega / delta)^2.
    """
    omega = np.asarray(omega, dtype=float)
    delta = np.asarray(delta, dtype=float)
    denom = omega**2 + delta**2
    out = np.divide(omega**2, denom, out=np.zeros(np.broadcast(omega, delta).shape), where=denom > 0)
    return out if out.ndim else float(out)


# --- propagation ---------------------------------------------------------------------


def rotation(angle: float, axis: float) -> np.ndarray:
    """Ideal rotation on (g, e), same sense as a resonant tone with phase ``axis``."""
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    return np.array(
        [[c, -1j * s * cmath.exp(1j * axis)], [-1j * s * cmath.exp(-1j * axis), c]],
        dtype=complex,
    )


def _apply(u: np.ndarray, g, e):
    return u[0, 0] * g + u[0, 1] * e, u[1, 0] * g + u[1, 1] * e


def _check_tones(tones: Seq[ResolvedTone], qubit: QubitSpec):
    for tone in tones:
        if abs(tone.carrier - qubit.frequency) * 1e3 > RWA_LIMIT_MHZ:
            raise RWAError(
                f"tone at {tone.carrier} GHz is {abs(tone.carrier - qubit.frequency) * 1e3:.0f} MHz "
                f"from qubit {qubit.id}; rotating-wave approximation not valid"
            )


def max_rate(tones: Seq[ResolvedTone], qubit: QubitSpec) -> float:
    """Largest of |Delta_k| and peak Omega_k over the tones, MHz."""
    rate = 0.0
    for tone in tones:
        rate = max(rate, abs(tone.carrier - qubit.frequency) * 1e3, qubit.rabi_scale * tone.envelope.amplitude)
    return rate


def stable_dt(tones: Seq[ResolvedTone], qubit: QubitSpec, dt: float = DEFAULT_DT, margin: float = 0.9) -> float:
    """``dt`` reduced, if needed, so the step bound holds with some margin."""
    rate = max_rate(tones, qubit)
    if rate == 0:
        return dt
    return min(dt, margin * STEP_BOUND / (2 * math.pi * rate * 1e-3))


def rk4_propagate(g, e, field_samples, dt: float, renormalize: bool = True):
    """Fixed-step RK4 for i d(psi)/dt = 2 pi H psi with H = [[0, h*/2], [h/2, 0]].

    ``field_samples`` holds h (MHz) at t0, t0 + dt/2, t0 + dt, ... (2n + 1 rows);
    any object with ``len`` and integer indexing works, so rows can be computed
    lazily. ``g`` and ``e`` may be complex scalars or arrays broadcast against
    each row. Returns (g, e, worst pre-renormalisation norm drift).
    """
    k = 0.5 * _TWO_PI_PER_NS * dt
    n = (len(field_samples) - 1) // 2
    drift = 0.0
    h2 = field_samples[0]
    c2 = h2.conjugate()
    for step in range(n):
        h0, c0 = h2, c2
        h1, h2 = field_samples[2 * step + 1], field_samples[2 * step + 2]
        c1, c2 = h1.conjugate(), h2.conjugate()
        # derivative scaled by dt: dg = -i k h* e, de = -i k h g
        ag = -1j * k * c0 * e
        ae = -1j * k * h0 * g
        bg = -1j * k * c1 * (e + 0.5 * ae)
        be = -1j * k * h1 * (g + 0.5 * ag)
        cg = -1j * k * c1 * (e + 0.5 * be)
        ce = -1j * k * h1 * (g + 0.5 * bg)
        dg = -1j * k * c2 * (e + ce)
        de = -1j * k * h2 * (g + cg)
        g = g + (ag + 2 * bg + 2 * cg + dg) / 6
        e = e + (ae + 2 * be + 2 * ce + de) / 6
        if renormalize:
            norm = np.sqrt(np.abs(g) ** 2 + np.abs(e) ** 2)
            drift = max(drift, float(np.max(np.abs(norm - 1))))
            g = g / norm
            e = e / norm
    return g, e, drift


def _square_step(g, e, omega_c: complex, detuning: float, t0: float, t1: float):
    """Exact propagation under one constant square tone.

    ``omega_c`` is the complex Rabi amplitude rabi_scale * A * exp(i phi) in MHz,
    ``detuning`` the tone minus qubit frequency in MHz, times in ns.
    """
    w = 2 * math.pi * detuning * 1e-3  # rad/ns
    gc = math.pi * 1e-3 * omega_c  # tone-frame <g|H|e> = (Omega/2) e^{i phi}, rad/ns
    # move into the frame rotating with the tone
    e = e * cmath.exp(1j * w * t0)
    lam = math.sqrt(0.25 * w * w + abs(gc) ** 2)
    T = t1 - t0
    if lam == 0:
        cs, sn = 1.0, 0.0
    else:
        cs, sn = math.cos(lam * T), math.sin(lam * T) / lam
    # K = [[w/2, gc], [gc*, -w/2]], U = exp(i w T / 2) (cos I - i sin K)
    glob = cmath.exp(0.5j * w * T)
    g_new = glob * (cs * g - 1j * sn * (0.5 * w * g + gc * e))
    e_new = glob * (cs * e - 1j * sn * (gc.conjugate() * g - 0.5 * w * e))
    return g_new, e_new * cmath.exp(-1j * w * t1)


def _segments(tones: Seq[ResolvedTone], pulses: Seq[ControlPulse], duration: float):
    cuts = {0.0, duration}
    for t in tones:
        cuts.update((t.start, t.stop))
    for p in pulses:
        cuts.add(p.time)
    return sorted(c for c in cuts if 0 <= c <= duration)


def simulate(
    tones: Seq[ResolvedTone],
    qubit: QubitSpec,
    duration: float,
    control_pulses: Seq[ControlPulse] = (),
    opts: SimOptions | None = None,
    *,
    method: str = "rk4",
    initial: QubitState | None = None,
) -> QubitState:
    """Evolve one qubit under its resolved tones; returns the final state.

    ``method="rk4"`` integrates with fixed-step RK4 (step ``opts.dt`` ns,
    shortened to divide each interval evenly). ``method="exact"`` requires
    every tone to be square and tones overlapping in time to share a carrier;
    each such interval then has a constant Hamiltonian in the tone's frame and
    is propagated in closed form. ``"auto"`` picks exact when possible.
    Intervals without tones are skipped (zero Hamiltonian in the qubit frame).
    """
    opts = opts or SimOptions()
    tones = list(tones)
    _check_tones(tones, qubit)
    if method == "auto":
        method = "exact" if _exact_ok(tones) else "rk4"
    if method == "rk4":
        rate = max_rate(tones, qubit)
        if 2 * math.pi * rate * 1e-3 * opts.dt >= STEP_BOUND:
            raise StepSizeError(
                f"dt={opts.dt} ns too coarse: 2 pi * {rate:.3g} MHz * dt = "
                f"{2 * math.pi * rate * 1e-3 * opts.dt:.3g} >= {STEP_BOUND}"
            )
    elif method == "exact":
        if not _exact_ok(tones):
            raise SequenceError("exact propagation needs square tones sharing a carrier wherever they overlap")
    else:
        raise ValueError(f"unknown method {method!r}")

    state = initial or QubitState.ground_state()
    g, e = state.ground, state.excited
    pulses = sorted(control_pulses, key=lambda p: p.time)
    cuts = _segments(tones, pulses, duration)
    drift = 0.0
    pi = 0
    for a, b in zip(cuts[:-1], cuts[1:]):
        while pi < len(pulses) and pulses[pi].time <= a:
            g, e = _apply(rotation(pulses[pi].angle, pulses[pi].axis), g, e)
            pi += 1
        active = [t for t in tones if t.start < b and t.stop > a]
        if not active or b <= a:
            continue
        if method == "exact":
            z = sum(qubit.rabi_scale * t.envelope.complex_amplitude() for t in active)
            if abs(z) == 0:
                continue
            det = (active[0].carrier - qubit.frequency) * 1e3
            g, e = _square_step(g, e, z, det, a, b)
        else:
            n = max(1, math.ceil((b - a) / opts.dt - 1e-9))
            h = (b - a) / n
            times = a + 0.5 * h * np.arange(2 * n + 1)
            field = qubit.rabi_scale * drive_field(active, qubit.frequency, times)
            g, e, d = rk4_propagate(complex(g), complex(e), field.tolist(), h)
            drift = max(drift, d)
    while pi < len(pulses):
        g, e = _apply(rotation(pulses[pi].angle, pulses[pi].axis), g, e)
        pi += 1
    norm = math.sqrt(abs(g) ** 2 + abs(e) ** 2)
    return QubitState(complex(g) / norm, complex(e) / norm, drift)


def _exact_ok(tones: Seq[ResolvedTone]) -> bool:
    if any(t.envelope.shape != "square" for t in tones):
        return False
    for i, a in enumerate(tones):
        for b in tones[i + 1 :]:
            if a.start < b.stop and b.start < a.stop and a.carrier != b.carrier:
                return False
    return True


# --- readout -------------------------------------------------------------------------


def coherence_factor(kind: str, free_time: float, qubit: QubitSpec) -> float:
    if kind == "echo":
        return math.exp(-free_time / qubit.t2_echo)
    if kind == "ramsey":
        return math.exp(-free_time / qubit.t2_ramsey)
    return 1.0


def readout_probability(p_excited, kind: str, free_time: float, qubit: QubitSpec, spam_error: float = 0.0):
    """Excited-state probability after the coherence envelope and symmetric readout flips."""
    p = 0.5 + (np.asarray(p_excited, dtype=float) - 0.5) * coherence_factor(kind, free_time, qubit)
    return spam_error + (1 - 2 * spam_error) * p


def measure(
    state: QubitState,
    kind: str,
    free_time: float,
    qubit: QubitSpec,
    opts: SimOptions,
    spam_error: float = 0.0,
) -> float:
    """Estimated excited-state probability from ``opts.shots`` binomial shots.

    ``free_time`` is the total free evolution in us (2 tau for an echo, the
    delay for Ramsey). With ``opts.rng`` unset the exact probability is returned.
    """
    p = float(readout_probability(state.excited_population(), kind, free_time, qubit, spam_error))
    p = min(max(p, 0.0), 1.0)
    if opts.rng is None:
        return p
    return opts.rng.binomial(opts.shots, p) / opts.shots


def run_sequence(
    sequence: Sequence,
    device: DeviceModel,
    opts: SimOptions | None = None,
    *,
    method: str = "auto",
) -> QubitState:
    """Resolve the measured qubit's drive and simulate the whole sequence."""
    if sequence.measured_qubit is None:
        raise SequenceError("sequence has no measured qubit")
    qubit = device.qubit(sequence.measured_qubit)
    tones = resolve_qubit_drive(sequence, qubit.id, device)
    return simulate(tones, qubit, sequence.duration, sequence.control_pulses, opts, method=method)


def measure_sequence(
    sequence: Sequence,
    device: DeviceModel,
    opts: SimOptions,
    *,
    method: str = "auto",
) -> float:
    state = run_sequence(sequence, device, opts, method=method)
    qubit = device.qubit(sequence.measured_qubit)
    return measure(state, sequence.kind, sequence.free_time, qubit, opts, device.spam_error)
