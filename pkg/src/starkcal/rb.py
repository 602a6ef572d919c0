"""Single-qubit randomized benchmarking under microwave crosstalk.

Three modes are supported. ``separate`` benchmarks one qubit at a time with
every other line silent. ``simultaneous_raw`` plays all selected qubits'
sequences at once on a shared 30 ns grid. ``simultaneous_compensated`` does
the same and also mirrors every pulse onto same-band lines through the
calibrated compensation phasors.

Gates are 30 ns cosine pulses. Each qubit is simulated under the drive it
actually receives after crosstalk mixing. Every slot of the grid is
integrated in parallel, and the slots are then composed per sequence. A
small depolarizing error per physical pulse sets a nonzero baseline.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence as Seq

import numpy as np
from scipy import stats
from scipy.optimize import curve_fit

from starkcal.device import DeviceModel, Phasor
from starkcal.dynamics import DEFAULT_DT, RWA_LIMIT_MHZ, STEP_BOUND, rk4_propagate, rotation
from starkcal.errors import FitError, MissingCalibrationError, RWAError
from starkcal.pulses import GATE_NS, effective_mixing, gate_amplitude

MODES = ("separate", "simultaneous_raw", "simultaneous_compensated")
DEFAULT_LENGTHS = tuple(2**k for k in range(1, 10))  # 2 .. 512
DEFAULT_SEQUENCES = 30
# depolarizing strength per physical pulse; gives separate EPG close to 0.2%
# at 1.875 pulses per Clifford
DEFAULT_DEPOLARIZING = 0.00213
DEPOLARIZED_SURVIVAL = 0.5  # F(m -> inf) under symmetric readout error

_SEQ_STREAM = 101
_SHOT_STREAM = 102

_PULSES = {
    "I": (0.0, 0.0),
    "X90": (math.pi / 2, 0.0),
    "-X90": (-math.pi / 2, 0.0),
    "Y90": (math.pi / 2, math.pi / 2),
    "-Y90": (-math.pi / 2, math.pi / 2),
    "X180": (math.pi, 0.0),
    "Y180": (math.pi, math.pi / 2),
}

# Standard 24-element table, pulses listed in the order they are played.
_CLIFFORD_TABLE = (
    # Paulis
    ("I",),
    ("X180",),
    ("Y180",),
    ("Y180", "X180"),
    # 2 pi / 3 rotations
    ("X90", "Y90"),
    ("X90", "-Y90"),
    ("-X90", "Y90"),
    ("-X90", "-Y90"),
    ("Y90", "X90"),
    ("Y90", "-X90"),
    ("-Y90", "X90"),
    ("-Y90", "-X90"),
    # pi / 2 rotations
    ("X90",),
    ("-X90",),
    ("Y90",),
    ("-Y90",),
    ("-X90", "Y90", "X90"),
    ("-X90", "-Y90", "X90"),
    # Hadamard-like
    ("X180", "Y90"),
    ("X180", "-Y90"),
    ("Y180", "X90"),
    ("Y180", "-X90"),
    ("X90", "Y90", "X90"),
    ("-X90", "Y90", "-X90"),
)


@dataclass(frozen=True)
class CliffordElement:
    index: int
    decomposition: tuple[str, ...]  # physical pulse names, in playing order

    def pulses(self) -> list[tuple[float, float]]:
        """(angle, axis) of each physical pulse."""
        return [_PULSES[name] for name in self.decomposition]

    def unitary(self) -> np.ndarray:
        u = np.eye(2, dtype=complex)
        for angle, axis in self.pulses():
            u = rotation(angle, axis) @ u
        return u


def _phase_key(u: np.ndarray) -> tuple:
    """Hashable form of ``u`` modulo global phase."""
    pivot = u[0, 0] if abs(u[0, 0]) > 1e-6 else u[0, 1]
    v = u * (abs(pivot) / pivot)
    return tuple(np.round(np.concatenate([v.real.ravel(), v.imag.ravel()]), 8) + 0.0)


@lru_cache(maxsize=None)
def clifford_group() -> tuple[CliffordElement, ...]:
    return tuple(CliffordElement(i, d) for i, d in enumerate(_CLIFFORD_TABLE))


@lru_cache(maxsize=None)
def _tables():
    group = clifford_group()
    lookup = {_phase_key(c.unitary()): c.index for c in group}
    if len(lookup) != len(group):
        raise AssertionError("Clifford table has duplicate elements")
    n = len(group)
    # product[a, b] = element equal to "play a, then b"
    product = np.empty((n, n), dtype=int)
    for a in group:
        for b in group:
            product[a.index, b.index] = lookup[_phase_key(b.unitary() @ a.unitary())]
    inverse = np.array([int(np.flatnonzero(product[a] == 0)[0]) for a in range(n)])
    return product, inverse


def compose(indices: Seq[int]) -> int:
    """Clifford equal to playing ``indices`` in order."""
    product, _ = _tables()
    acc = 0
    for i in indices:
        acc = int(product[acc, i])
    return acc


def inverse(index: int) -> int:
    return int(_tables()[1][index])


def sample_clifford_sequence(m: int, rng: np.random.Generator) -> list[CliffordElement]:
    """``m`` uniformly random Cliffords followed by the recovery element."""
    if m < 1:
        raise ValueError(f"sequence length must be >= 1, got {m}")
    group = clifford_group()
    drawn = [int(i) for i in rng.integers(0, len(group), size=m)]
    return [group[i] for i in drawn] + [group[inverse(compose(drawn))]]


# --- results ---------------------------------------------------------------------------------


@dataclass
class RBResult:
    qubit: int
    mode: str
    lengths: list[int]
    survival: list[float]  # mean over sequences, per length
    p: float
    epg: float
    fit_ci: float  # 95% half-width on p
    variance: list[float] = field(default_factory=list)  # variance of each mean
    sequence_survival: list[list[float]] = field(default_factory=list)  # [length][sequence]
    amplitude: float = float("nan")
    baseline: float = float("nan")

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.p <= 1:
            raise ValueError(f"decay parameter must be in (0, 1], got {self.p}")

    @property
    def epg_ci(self) -> float:
        """95% half-width on epg."""
        return self.fit_ci / 2


def fit_rb_decay(lengths, means, variances=None, baseline=None) -> tuple[float, float, float]:
    """Weighted fit of F(m) = A p^m + B; returns (p, epg, 95% half-width on p).

    ``variances`` are the variances of the means (None for equal weights).
    B is fitted within 0.1 of the fully depolarized value 1/2, or held at
    ``baseline`` when one is given.
    """
    p, epg, ci, _, _ = _fit_rb(lengths, means, variances, baseline)
    return p, epg, ci


def _fit_rb(lengths, means, variances, baseline=None):
    m = np.asarray(lengths, dtype=float)
    y = np.asarray(means, dtype=float)
    if m.size < 4:
        raise ValueError(f"need >= 4 lengths, got {m.size}")
    if m.size != y.size:
        raise ValueError("lengths and means differ in size")
    if variances is None:
        sigma = None
    else:
        var = np.asarray(variances, dtype=float)
        floor = max(1e-14, 1e-6 * float(var.max()))
        sigma = np.sqrt(np.maximum(var, floor))

    if baseline is None:
        def model(x, a, p, b):
            return a * p**x + b

        lower, upper = [0.0, 1e-9, 0.4], [1.0, 1.0, 0.6]
    else:
        def model(x, a, p):
            return a * p**x + baseline

        lower, upper = [0.0, 1e-9], [1.0, 1.0]

    # start p from the log-slope of the excess over 1/2
    b0 = 0.5 if baseline is None else baseline
    excess = np.clip(y - b0, 1e-6, None)
    slope = np.polyfit(m, np.log(excess), 1)[0]
    p0 = float(np.clip(math.exp(slope), 0.5, 1 - 1e-9))
    start = [max(float(y[0] - b0), 1e-3) / p0 ** m[0], p0, 0.5][: len(lower)]
    try:
        popt, pcov = curve_fit(
            model,
            m,
            y,
            p0=np.clip(start, lower, upper),
            sigma=sigma,
            bounds=(lower, upper),
            method="trf",
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=10_000,
        )
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"RB decay fit failed: {exc}") from exc
    a, p = float(popt[0]), float(popt[1])
    b = float(popt[2]) if baseline is None else float(baseline)
    sd = math.sqrt(max(float(pcov[1, 1]), 0.0)) if np.all(np.isfinite(pcov)) else float("inf")
    return p, (1 - p) / 2, 1.96 * sd, a, b


def crosstalk_error_reduction(separate_epg: float, raw_epg: float, comp_epg: float) -> float | None:
    """Percentage of the crosstalk-induced error removed by compensation.

    100 (raw - comp) / (raw - separate); None when raw does not exceed separate
    and the ratio is undefined.
    """
    denom = raw_epg - separate_epg
    if not denom > 0:
        return None
    return 100.0 * (raw_epg - comp_epg) / denom


# --- simulation ------------------------------------------------------------------------------


def _rng(device: DeviceModel, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(device.rng_seed, spawn_key=tuple(int(k) for k in key)))


def _sequences(device: DeviceModel, qubit: int, lengths: Seq[int], n_seq: int):
    """Clifford index lists, identical in every mode for a given (qubit, m, s)."""
    return {
        (m, s): [c.index for c in sample_clifford_sequence(m, _rng(device, _SEQ_STREAM, qubit, m, s))]
        for m in lengths
        for s in range(n_seq)
    }


def _pulse_trains(cliffords: Mapping[int, list[int]], aligned: bool) -> dict[int, list[tuple[float, float]]]:
    """Per-qubit (angle, axis) per 30 ns slot; ``aligned`` pads each Clifford
    to the longest decomposition among the qubits with idle slots."""
    group = clifford_group()
    qubits = sorted(cliffords)
    steps = len(cliffords[qubits[0]])
    trains = {q: [] for q in qubits}
    for k in range(steps):
        decs = {q: group[cliffords[q][k]].pulses() for q in qubits}
        width = max(len(d) for d in decs.values())
        for q in qubits:
            trains[q] += decs[q]
            if aligned:
                trains[q] += [(0.0, 0.0)] * (width - len(decs[q]))
    return trains


class _SlotField:
    """Lazy rows of the drive at one qubit across all slots: row k holds
    h(t_s + k dt / 2) for every slot s."""

    def __init__(self, coef: np.ndarray, basis: np.ndarray):
        self.coef = coef  # (slots, lines)
        self.basis = basis  # (lines, 2n + 1)

    def __len__(self):
        return self.basis.shape[1]

    def __getitem__(self, k):
        return self.coef @ self.basis[:, k]


def _slot_unitaries(device, qubit, lines, mixing, amplitudes, starts, dt):
    """Propagators (slots, 2, 2) of ``qubit`` for every 30 ns slot.

    ``amplitudes[j, s]`` is the complex amplitude line ``lines[j]`` plays in
    slot s, which starts at ``starts[s]`` ns. Slots without drive stay identity.
    """
    qb = device.qubit(qubit)
    n_slots = amplitudes.shape[1]
    u = np.broadcast_to(np.eye(2, dtype=complex), (n_slots, 2, 2)).copy()
    coupling = np.array([mixing[qubit, j] for j in lines])
    keep = np.abs(coupling) > 0
    if not keep.any():
        return u
    df = np.array([device.qubit(j).frequency - qb.frequency for j in lines])[keep]  # GHz
    if np.any(np.abs(df) * 1e3 > RWA_LIMIT_MHZ):
        raise RWAError(f"a line reaching qubit {qubit} is more than {RWA_LIMIT_MHZ} MHz detuned")
    amps = amplitudes[keep] * coupling[keep, None]
    active = np.flatnonzero(np.any(np.abs(amps) > 0, axis=0))
    if active.size == 0:
        return u
    # step bound on the fastest rate seen by this qubit
    rate = max(float(np.max(np.abs(df))) * 1e3, qb.rabi_scale * float(np.max(np.abs(amps))))
    step = min(dt, 0.9 * STEP_BOUND / (2 * math.pi * rate * 1e-3))
    n = max(1, math.ceil(GATE_NS / step - 1e-9))
    h = GATE_NS / n
    tau = 0.5 * h * np.arange(2 * n + 1)
    env = 0.5 * (1 - np.cos(2 * np.pi * tau / GATE_NS))
    basis = env[None, :] * np.exp(-2j * np.pi * df[:, None] * tau[None, :])
    coef = qb.rabi_scale * np.conj(amps[:, active]).T * np.exp(-2j * np.pi * df[None, :] * starts[active, None])
    ones = np.ones(active.size, dtype=complex)
    zeros = np.zeros(active.size, dtype=complex)
    g, e, _ = rk4_propagate(np.stack([ones, zeros]), np.stack([zeros, ones]), _SlotField(coef, basis), h)
    u[active, 0, 0], u[active, 1, 0] = g[0], e[0]
    u[active, 0, 1], u[active, 1, 1] = g[1], e[1]
    return u


def _line_amplitudes(device: DeviceModel, lines: Seq[int], trains, slot_count: int) -> np.ndarray:
    amps = np.zeros((len(lines), slot_count), dtype=complex)
    for row, j in enumerate(lines):
        rs = device.qubit(j).rabi_scale
        for s, (angle, axis) in enumerate(trains[j]):
            if angle != 0:
                phase = axis + (math.pi if angle < 0 else 0.0)
                amps[row, s] = gate_amplitude(angle, rs) * complex(math.cos(phase), math.sin(phase))
    return amps


def _survival_probabilities(
    device: DeviceModel,
    qubit: int,
    group: Seq[int],
    mode: str,
    lengths: Seq[int],
    n_seq: int,
    mixing: np.ndarray,
    depolarizing: float,
    dt: float,
    sequences: Mapping[int, dict],
) -> np.ndarray:
    """Exact survival (lengths, sequences) for ``qubit``, SPAM included."""
    lines = [qubit] if mode == "separate" else sorted(group)
    keys = [(m, s) for m in lengths for s in range(n_seq)]
    trains_per_seq = []
    offsets = [0]
    for key in keys:
        trains = _pulse_trains({q: sequences[q][key] for q in lines}, aligned=mode != "separate")
        trains_per_seq.append(trains)
        offsets.append(offsets[-1] + len(trains[qubit]))
    amps = np.zeros((len(lines), offsets[-1]), dtype=complex)
    starts = np.empty(offsets[-1])
    for i, trains in enumerate(trains_per_seq):
        a, b = offsets[i], offsets[i + 1]
        amps[:, a:b] = _line_amplitudes(device, lines, trains, b - a)
        starts[a:b] = GATE_NS * np.arange(b - a)  # every sequence starts at t = 0
    u = _slot_unitaries(device, qubit, lines, mixing, amps, starts, dt)

    group_ = clifford_group()
    lam = 1.0 - depolarizing
    eps = device.spam_error
    out = np.empty(len(keys))
    for i, key in enumerate(keys):
        psi = np.array([1.0 + 0j, 0j])
        for k in range(offsets[i], offsets[i + 1]):
            psi = u[k] @ psi
        z = abs(psi[0]) ** 2 - abs(psi[1]) ** 2
        # depolarizing acts once per physical pulse of the qubit's own decomposition
        pulses = sum(len(group_[c].decomposition) for c in sequences[qubit][key])
        out[i] = eps + (1 - 2 * eps) * 0.5 * (1 + lam**pulses * z)
    return np.clip(out, 0.0, 1.0).reshape(len(lengths), n_seq)


def _mixing(device: DeviceModel, mode: str, compensation) -> np.ndarray:
    if mode == "simultaneous_compensated":
        return effective_mixing(device, compensation)
    return device.crosstalk.as_array()


def _qubit_job(args):
    device, qubit, group, mode, lengths, n_seq, mixing, depolarizing, dt = args
    sequences = {q: _sequences(device, q, lengths, n_seq) for q in ([qubit] if mode == "separate" else group)}
    return _survival_probabilities(device, qubit, group, mode, lengths, n_seq, mixing, depolarizing, dt, sequences)


def run_rb(
    device: DeviceModel,
    qubits: Seq[int],
    mode: str,
    lengths: Seq[int] = DEFAULT_LENGTHS,
    sequences_per_length: int = DEFAULT_SEQUENCES,
    compensation: Mapping[tuple[int, int], Phasor] | None = None,
    *,
    shots: int | None = None,
    dt: float = DEFAULT_DT,
    depolarizing: float = DEFAULT_DEPOLARIZING,
    sample: bool = True,
    baseline: float | None = DEPOLARIZED_SURVIVAL,
    workers: int = 1,
) -> list[RBResult]:
    """Benchmark ``qubits`` in one mode; returns one RBResult per qubit.

    Clifford sequences and shot-noise draws depend only on (device seed,
    qubit, m, sequence index), so the three modes see identical sequences and
    common random numbers. ``compensation`` maps (control, target) to the
    calibrated phasor and is required in compensated mode; pairs missing from
    it get no compensation tone. ``sample=False`` returns exact survival
    probabilities instead of binomial estimates. Readout errors are symmetric,
    so a fully depolarized qubit survives with probability exactly 1/2 in
    every mode; the decay fit holds B there by default (``baseline=None``
    fits it), which keeps mode-to-mode EPG differences free of A-B trade-offs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    qubits = list(qubits)
    if not qubits or len(set(qubits)) != len(qubits):
        raise ValueError("qubits must be a non-empty list of distinct ids")
    for q in qubits:
        device.qubit(q)
    lengths = [int(m) for m in lengths]
    if any(m < 1 for m in lengths) or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError(f"lengths must be positive and strictly increasing, got {lengths}")
    if sequences_per_length < 2:
        raise ValueError("need >= 2 sequences per length")
    if not 0 <= depolarizing < 1:
        raise ValueError("depolarizing must be in [0, 1)")
    if mode == "simultaneous_compensated" and compensation is None:
        raise MissingCalibrationError("compensated mode needs a compensation table")
    shots = shots or device.readout_shots_default
    mixing = _mixing(device, mode, compensation)

    jobs = [(device, q, qubits, mode, lengths, sequences_per_length, mixing, depolarizing, dt) for q in qubits]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            probabilities = list(pool.map(_qubit_job, jobs))
    else:
        probabilities = [_qubit_job(j) for j in jobs]

    results = []
    for q, prob in zip(qubits, probabilities):
        if sample:
            u = np.array(
                [[_rng(device, _SHOT_STREAM, q, m, s).random() for s in range(sequences_per_length)] for m in lengths]
            )
            survival = stats.binom.ppf(u, shots, prob) / shots
        else:
            survival = prob
        means = survival.mean(axis=1)
        variances = survival.var(axis=1, ddof=1) / sequences_per_length
        p, epg, ci, a, b = _fit_rb(lengths, means, variances, baseline)
        results.append(
            RBResult(
                qubit=q,
                mode=mode,
                lengths=lengths,
                survival=[float(v) for v in means],
                p=p,
                epg=epg,
                fit_ci=ci,
                variance=[float(v) for v in variances],
                sequence_survival=survival.tolist(),
                amplitude=a,
                baseline=b,
            )
        )
    return results


# --- export ----------------------------------------------------------------------------------

RAW_COLUMNS = ["mode", "qubit", "m", "sequence", "survival"]
SUMMARY_COLUMNS = [
    "qubit",
    "epg_separate",
    "ci_separate",
    "epg_raw",
    "ci_raw",
    "epg_compensated",
    "ci_compensated",
    "reduction_percent",
]


def rb_rows(results: Seq[RBResult]) -> list[list[str]]:
    """Per-sequence survival, one row per (mode, qubit, m, sequence)."""
    rows = []
    for r in results:
        for m, per_seq in zip(r.lengths, r.sequence_survival):
            for s, v in enumerate(per_seq):
                rows.append([r.mode, str(r.qubit), str(m), str(s), repr(float(v))])
    return rows


def summary_rows(results: Seq[RBResult]) -> list[list[str]]:
    """One row per qubit: EPG and 95% half-width per mode, then the reduction
    percentage ("NA" when raw does not exceed separate). EPGs are fractions."""
    by = {(r.qubit, r.mode): r for r in results}
    rows = []
    for q in sorted({r.qubit for r in results}):
        row = [str(q)]
        epg = {}
        for mode in MODES:
            r = by.get((q, mode))
            if r is None:
                row += ["NA", "NA"]
            else:
                epg[mode] = r.epg
                row += [repr(r.epg), repr(r.epg_ci)]
        red = None
        if len(epg) == 3:
            red = crosstalk_error_reduction(epg["separate"], epg["simultaneous_raw"], epg["simultaneous_compensated"])
        row.append("NA" if red is None else repr(red))
        rows.append(row)
    return rows
