"""Drive sequences on physical lines and their resolution onto qubits.

Times inside sequences are in ns, carriers in GHz. Builder arguments that
describe free-evolution times (``tau``, ``delay``) are in us, like the rest of
the package.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence as Seq

import numpy as np

from starkcal.device import DeviceModel, Phasor
from starkcal.errors import SequenceError

GATE_NS = 30.0
DROP_BELOW = 1e-12
_TIME_TOL = 1e-9

# instantaneous control rotations: (angle, axis phase)
X90 = (math.pi / 2, 0.0)
Y180 = (math.pi, math.pi / 2)


@dataclass(frozen=True)
class Envelope:
    shape: str  # "square" | "cosine"
    duration: float  # ns
    amplitude: float
    phase: float = 0.0  # rad

    def __post_init__(self):
        if self.shape not in ("square", "cosine"):
            raise SequenceError(f"unknown envelope shape {self.shape!r}")
        if not self.duration > 0:
            raise SequenceError(f"envelope duration must be > 0, got {self.duration}")
        if not self.amplitude >= 0:
            raise SequenceError(f"envelope amplitude must be >= 0, got {self.amplitude}")

    def __call__(self, t):
        """Real envelope at time ``t`` (ns) after the tone start; zero outside."""
        t = np.asarray(t, dtype=float)
        inside = (t >= 0) & (t <= self.duration)
        if self.shape == "square":
            value = np.full_like(t, self.amplitude)
        else:
            value = 0.5 * self.amplitude * (1 - np.cos(2 * np.pi * t / self.duration))
        return np.where(inside, value, 0.0)

    def complex_amplitude(self) -> complex:
        return cmath.rect(self.amplitude, self.phase)

    def mean(self) -> float:
        """Time-averaged envelope over the tone duration."""
        return self.amplitude if self.shape == "square" else 0.5 * self.amplitude


@dataclass(frozen=True)
class DriveTone:
    line: int
    carrier: float  # GHz
    envelope: Envelope
    start: float = 0.0  # ns

    def __post_init__(self):
        if self.start < 0:
            raise SequenceError(f"tone start must be >= 0, got {self.start}")
        if not self.carrier > 0:
            raise SequenceError(f"carrier must be > 0, got {self.carrier}")

    @property
    def stop(self) -> float:
        return self.start + self.envelope.duration


@dataclass(frozen=True)
class ResolvedTone:
    """A tone as seen by one qubit after crosstalk mixing."""

    carrier: float  # GHz
    envelope: Envelope
    start: float  # ns

    @property
    def stop(self) -> float:
        return self.start + self.envelope.duration


@dataclass(frozen=True)
class ControlPulse:
    """Ideal instantaneous rotation on the measured qubit."""

    time: float  # ns
    angle: float  # rad
    axis: float = 0.0  # rad, rotation axis angle in the equatorial plane


@dataclass(frozen=True)
class Sequence:
    tones: tuple[DriveTone, ...]
    control_pulses: tuple[ControlPulse, ...]
    duration: float  # ns
    measured_qubit: int | None
    kind: str = "custom"  # echo | ramsey | rb | custom
    free_time: float = 0.0  # us of free evolution, sets the coherence envelope

    def __post_init__(self):
        object.__setattr__(self, "tones", tuple(self.tones))
        object.__setattr__(self, "control_pulses", tuple(self.control_pulses))
        for tone in self.tones:
            if tone.stop > self.duration * (1 + _TIME_TOL) + _TIME_TOL:
                raise SequenceError(f"tone on line {tone.line} ends at {tone.stop} ns, after {self.duration} ns")
        for pulse in self.control_pulses:
            if not -_TIME_TOL <= pulse.time <= self.duration * (1 + _TIME_TOL) + _TIME_TOL:
                raise SequenceError(f"control pulse at {pulse.time} ns outside [0, {self.duration}]")

    def __add__(self, other: "Sequence") -> "Sequence":
        return Sequence(
            self.tones + other.tones,
            self.control_pulses + other.control_pulses,
            max(self.duration, other.duration),
            self.measured_qubit if self.measured_qubit is not None else other.measured_qubit,
            self.kind,
            max(self.free_time, other.free_time),
        )

    def dump(self) -> str:
        """Line-oriented text form, one tone or control pulse per line."""
        out = [
            f"# kind={self.kind} measured_qubit={self.measured_qubit} "
            f"duration_ns={self.duration!r} free_time_us={self.free_time!r}"
        ]
        for t in self.tones:
            e = t.envelope
            out.append(
                f"tone {t.line} {t.carrier!r} {e.shape} {t.start!r} {e.duration!r} {e.amplitude!r} {e.phase!r}"
            )
        for p in self.control_pulses:
            out.append(f"pulse {p.time!r} {p.angle!r} {p.axis!r}")
        return "\n".join(out) + "\n"


def _check_pair(device: DeviceModel, target: int, control: int):
    device.qubit(target)
    device.qubit(control)
    if target == control:
        raise SequenceError("target and control must differ")


def _comp_tone(line: int, carrier: float, comp: Phasor | None, amplitude: float, phase: float, start, duration):
    if comp is None or amplitude == 0 or comp.magnitude() == 0:
        return []
    env = Envelope("square", duration, comp.magnitude() * amplitude, phase + comp.phase())
    return [DriveTone(line, carrier, env, start)]


def build_echo_scan_sequence(
    target: int,
    control: int,
    tau: float,
    test_amplitude: float,
    test_phase: float,
    comp: Phasor,
    device: DeviceModel,
) -> Sequence:
    """Spin echo on ``target`` with the test tone on for the second half only.

    The test tone plays on the control line at the control frequency during
    [tau, 2 tau]; the compensation tone plays simultaneously on the target's
    own line at the same carrier, scaled and rotated by ``comp``.
    """
    _check_pair(device, target, control)
    if not tau > 0:
        raise SequenceError(f"tau must be > 0, got {tau}")
    tau_ns = tau * 1e3
    carrier = device.qubit(control).frequency
    tones = []
    if test_amplitude > 0:
        tones.append(DriveTone(control, carrier, Envelope("square", tau_ns, test_amplitude, test_phase), tau_ns))
    tones += _comp_tone(target, carrier, comp, test_amplitude, test_phase, tau_ns, tau_ns)
    pulses = (
        ControlPulse(0.0, *X90),
        ControlPulse(tau_ns, *Y180),
        ControlPulse(2 * tau_ns, *X90),
    )
    return Sequence(tuple(tones), pulses, 2 * tau_ns, target, "echo", 2 * tau)


def build_ramsey_sequence(
    target: int,
    control: int,
    delay: float,
    test_amplitude: float,
    comp: Phasor | None,
    artificial_detuning: float,
    device: DeviceModel,
    test_phase: float = 0.0,
) -> Sequence:
    """Ramsey on ``target`` with the test tone on for the whole free evolution.

    The second pi/2 pulse is advanced in phase by 2 pi * artificial_detuning * delay
    (MHz * us), emulating a detuned reference frame.
    """
    _check_pair(device, target, control)
    if not delay > 0:
        raise SequenceError(f"delay must be > 0, got {delay}")
    delay_ns = delay * 1e3
    carrier = device.qubit(control).frequency
    tones = []
    if test_amplitude > 0:
        tones.append(DriveTone(control, carrier, Envelope("square", delay_ns, test_amplitude, test_phase), 0.0))
    tones += _comp_tone(target, carrier, comp, test_amplitude, test_phase, 0.0, delay_ns)
    pulses = (
        ControlPulse(0.0, *X90),
        ControlPulse(delay_ns, math.pi / 2, 2 * math.pi * artificial_detuning * delay),
    )
    return Sequence(tuple(tones), pulses, delay_ns, target, "ramsey", delay)


def resolve_qubit_drive(sequence: Sequence, qubit: int, device: DeviceModel) -> list[ResolvedTone]:
    """Tones reaching ``qubit``: each line-j tone multiplied by C[qubit][j].

    Tones sharing carrier, shape, start and duration are summed as phasors;
    anything whose resolved amplitude falls below 1e-12 is dropped.
    """
    device.qubit(qubit)
    c = device.crosstalk.as_array()
    merged: dict[tuple, complex] = {}
    for tone in sequence.tones:
        z = c[qubit, tone.line] * tone.envelope.complex_amplitude()
        key = (tone.carrier, tone.envelope.shape, tone.start, tone.envelope.duration)
        merged[key] = merged.get(key, 0j) + z
    resolved = []
    for (carrier, shape, start, duration), z in merged.items():
        if abs(z) < DROP_BELOW:
            continue
        resolved.append(ResolvedTone(carrier, Envelope(shape, duration, abs(z), cmath.phase(z)), start))
    return resolved


def drive_field(tones: Iterable[ResolvedTone], qubit_frequency: float, times_ns) -> np.ndarray:
    """Complex drive (amplitude units) in the frame of a qubit at ``qubit_frequency`` GHz.

    Returns sum_k env_k(t) * exp(-i (2 pi Delta_k t + phi_k)), Delta_k = f_k - f_q.
    """
    t = np.asarray(times_ns, dtype=float)
    h = np.zeros(t.shape, dtype=complex)
    for tone in tones:
        df = tone.carrier - qubit_frequency  # GHz
        h += tone.envelope(t - tone.start) * np.exp(-1j * (2 * np.pi * df * t + tone.envelope.phase))
    return h


@dataclass(frozen=True)
class GatePulse:
    """One physical gate in an RB train: rotation ``angle`` about equatorial ``axis``."""

    start: float  # ns
    angle: float  # rad, may be negative
    axis: float = 0.0


def gate_amplitude(angle: float, rabi_scale: float, duration_ns: float = GATE_NS) -> float:
    """Cosine-pulse amplitude giving rotation ``angle`` for a qubit with ``rabi_scale`` MHz."""
    return abs(angle) / (math.pi * rabi_scale * duration_ns * 1e-3)


def build_rb_sequence(
    trains: Mapping[int, Seq[GatePulse]],
    device: DeviceModel,
    compensation: Mapping[tuple[int, int], Phasor] | None = None,
) -> Sequence:
    """Compile gate trains into cosine tones on each qubit's own line.

    ``compensation`` maps (control, target) to the calibrated phasor; when
    given, every tone on line j is mirrored onto each same-band line k at
    line j's carrier, scaled by ``compensation[(j, k)]``.
    """
    tones = []
    end = 0.0
    for q, train in sorted(trains.items()):
        qb = device.qubit(q)
        for g in train:
            if abs(g.start / GATE_NS - round(g.start / GATE_NS)) > 1e-9:
                raise SequenceError(f"gate on qubit {q} at {g.start} ns is off the {GATE_NS} ns grid")
            end = max(end, g.start + GATE_NS)
            if g.angle == 0:
                continue
            phase = g.axis + (math.pi if g.angle < 0 else 0.0)
            env = Envelope("cosine", GATE_NS, gate_amplitude(g.angle, qb.rabi_scale), phase)
            tone = DriveTone(q, qb.frequency, env, g.start)
            tones.append(tone)
            if compensation:
                for k in range(device.n):
                    if k == q or not device.same_band(q, k):
                        continue
                    comp = compensation.get((q, k))
                    if comp is None or comp.magnitude() == 0:
                        continue
                    cenv = Envelope("cosine", GATE_NS, env.amplitude * comp.magnitude(), phase + comp.phase())
                    tones.append(DriveTone(k, qb.frequency, cenv, g.start))
    return Sequence(tuple(tones), (), end, None, "rb", end * 1e-3)


def effective_mixing(device: DeviceModel, compensation: Mapping[tuple[int, int], Phasor] | None) -> np.ndarray:
    """Matrix M with M[i, j] = total amplitude at qubit i per unit tone on line j.

    Equals C @ (I + K) where K[k, j] is the compensation phasor emitted on line k
    for control j; this is the array form of build_rb_sequence + resolve_qubit_drive.
    """
    n = device.n
    k = np.eye(n, dtype=complex)
    for (control, target), comp in (compensation or {}).items():
        if control != target and device.same_band(control, target):
            k[target, control] += complex(comp)
    return device.crosstalk.as_array() @ k
