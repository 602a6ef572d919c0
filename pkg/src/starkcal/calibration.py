"""Crosstalk calibration from Stark-shift echo interferometry.

The echo signal on the target qubit, as a function of the compensation
phasor r applied on its own line, forms concentric rings centred on the
point where compensation cancels the leak (r = -r*). The calibration locates
that centre: a coarse 2D scan, then alternating orthogonal linecuts fitted to
the ring model while the echo time grows.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence as Seq

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from starkcal.device import DeviceModel, Phasor, detuning
from starkcal.dynamics import (
    SimOptions,
    analytic_stark_shift,
    measure,
    run_sequence,
)
from starkcal.errors import FitError, MissingCalibrationError, StarkcalError
from starkcal.pulses import build_echo_scan_sequence, build_ramsey_sequence

log = logging.getLogger(__name__)

ARTIFICIAL_DETUNING = 0.5  # MHz


@dataclass(frozen=True)
class ScanSample:
    r: Phasor
    signal: float
    tau: float  # us

    def __post_init__(self):
        if not 0 <= self.signal <= 1:
            raise ValueError(f"signal must be in [0, 1], got {self.signal}")


@dataclass
class CalibrationResult:
    control: int
    target: int
    comp: Phasor  # optimal compensation, -r*
    residual: float  # RMS misfit of the last linecut fits
    tau_schedule: list[float]  # us
    evaluations: int  # scan points measured
    converged: bool = True
    uncertainty: float = float("nan")  # 1-sigma radius of the final centre estimate
    stage_uncertainty: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError("residual must be >= 0")
        if any(b <= a for a, b in zip(self.tau_schedule, self.tau_schedule[1:])):
            raise ValueError("tau_schedule must be strictly increasing")

    @property
    def crosstalk(self) -> Phasor:
        """Estimated leak r* = -comp."""
        return -self.comp


@dataclass(frozen=True)
class StarkMatrixEntry:
    control: int
    target: int
    shift: float  # MHz


@dataclass(frozen=True)
class CalibrationConfig:
    test_amplitude: float | None = None  # None: chosen from the detuning (see auto_test_amplitude)
    tau_start: float = 0.5  # us
    tau_growth: float = 2.0
    tau_max: float = 4.0  # us
    r_bound: float = 0.2  # expected crosstalk magnitude bound; coarse grid spans +-2 r_bound
    coarse_points: int = 21
    linecut_points: int = 61
    fringes: float = 3.0  # target fringe count across half a linecut
    max_omega_ratio: float = 0.6  # cap on Omega / |Delta| at the linecut edge
    cells_per_fringe: float = 3.0  # coarse-grid sampling of the densest fringes at tau_start
    shots: int | None = None  # None: device default
    max_iterations: int = 12
    starts: int = 7
    test_phase: float = 0.0

    def __post_init__(self):
        if not self.tau_start > 0:
            raise ValueError("tau_start must be > 0")
        if not self.tau_start < self.tau_max:
            raise ValueError("tau_start must be < tau_max")
        if not self.tau_growth >= 1:
            raise ValueError("tau_growth must be >= 1")
        if self.coarse_points < 3 or self.linecut_points < 15:
            raise ValueError("need >= 3 coarse points per axis and >= 15 linecut points")
        if self.test_amplitude is not None and not self.test_amplitude > 0:
            raise ValueError("test_amplitude must be > 0")
        if not self.r_bound > 0:
            raise ValueError("r_bound must be > 0")

    def tau_schedule(self) -> list[float]:
        taus = [self.tau_start]
        if self.tau_growth == 1:
            return taus * self.max_iterations
        while taus[-1] * self.tau_growth <= self.tau_max * (1 + 1e-12):
            taus.append(taus[-1] * self.tau_growth)
        return taus


# --- ring model --------------------------------------------------------------------------


def stark_from_omega_sq(omega_sq, delta):
    """Stark shift as a function of Omega^2 (smooth through Omega = 0)."""
    omega_sq = np.asarray(omega_sq, dtype=float)
    return np.sign(delta) * omega_sq / (np.sqrt(omega_sq + delta * delta) + abs(delta))


def echo_signal(distance_sq, scale, delta, tau, offset=0.5, contrast=0.5):
    """Normalised echo signal offset + contrast * cos(2 pi delta_stark tau).

    ``distance_sq`` is |r + r*|^2, ``scale`` the Rabi frequency (MHz) per unit
    of |r + r*|, i.e. test amplitude times the target's rabi scale.
    """
    shift = stark_from_omega_sq(np.asarray(distance_sq) * scale**2, delta)
    return offset + contrast * np.cos(2 * np.pi * shift * tau)


def omega_for_phase(cycles: float, tau: float, delta: float) -> float:
    """Rabi frequency whose Stark shift accumulates ``cycles`` fringes in time ``tau``."""
    s = cycles / tau
    return math.sqrt(s * s + 2 * abs(delta) * s)


def ring_radius(k: float, tau: float, delta: float, scale: float) -> float:
    """Distance |r + r*| of the k-th bright ring (k = 0.5 gives the first dark ring)."""
    return omega_for_phase(k, tau, delta) / scale


def auto_test_amplitude(config: CalibrationConfig, delta: float, rabi_scale: float) -> float:
    """Largest amplitude for which the coarse scan still resolves the rings.

    Fringes are densest at the far corner of the coarse window, at distance
    about (2 sqrt(2) + 1) r_bound from the ring centre. There the local fringe
    period must cover ``cells_per_fringe`` grid cells at tau_start, i.e.
    tau * s * D / sqrt(s D^2 + delta^2) = 1 / (k * cell) with s = scale^2.
    """
    cell = 4 * config.r_bound / (config.coarse_points - 1)
    far = (2 * math.sqrt(2) + 1) * config.r_bound
    c = 1.0 / (config.cells_per_fringe * cell * config.tau_start * far)
    s = 0.5 * (c * c * far * far + math.sqrt(c**4 * far**4 + 4 * c * c * delta * delta))
    return math.sqrt(s) / rabi_scale


# --- scanning -------------------------------------------------------------------------------


def _rng_for(device: DeviceModel, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(device.rng_seed, spawn_key=tuple(int(k) for k in key)))


def rings_scan(
    device: DeviceModel,
    target: int,
    control: int,
    A: float,
    tau: float,
    grid: Iterable[Phasor],
    opts: SimOptions,
    test_phase: float = 0.0,
) -> list[ScanSample]:
    """Measure the echo signal at each compensation phasor in ``grid``."""
    if not A > 0:
        raise ValueError("test amplitude must be > 0")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    grid = list(grid)
    if not grid:
        raise ValueError("empty scan grid")
    qubit = device.qubit(target)
    samples = []
    for r in grid:
        seq = build_echo_scan_sequence(target, control, tau, A, test_phase, r, device)
        state = run_sequence(seq, device, opts, method="exact")
        s = measure(state, seq.kind, seq.free_time, qubit, opts, device.spam_error)
        samples.append(ScanSample(r, s, tau))
    return samples


def _axis(half_width: float, points: int) -> np.ndarray:
    if points < 1:
        raise ValueError(f"need >= 1 grid point, got {points}")
    if not half_width >= 0:
        raise ValueError(f"half width must be >= 0, got {half_width}")
    return np.zeros(1) if points == 1 else np.linspace(-half_width, half_width, points)


def square_grid(center: complex, half_width: float, points: int) -> list[Phasor]:
    axis = _axis(half_width, points)
    return [Phasor(center.real + x, center.imag + y) for y in axis for x in axis]


def linecut_grid(center: complex, half_width: float, points: int, axis: str) -> list[Phasor]:
    offsets = _axis(half_width, points)
    if axis == "x":
        return [Phasor(center.real + o, center.imag) for o in offsets]
    return [Phasor(center.real, center.imag + o) for o in offsets]


def smoothed_peak(values: np.ndarray, axis: np.ndarray, center: complex = 0j) -> complex:
    """Centre estimate from a square scan: argmax of the 3x3-smoothed signal,
    refined by the centroid of the smoothed excess in its neighbourhood."""
    sm = ndimage.uniform_filter(values, size=3, mode="nearest")
    iy, ix = np.unravel_index(np.argmax(sm), sm.shape)
    y0, y1 = max(iy - 1, 0), min(iy + 2, sm.shape[0])
    x0, x1 = max(ix - 1, 0), min(ix + 2, sm.shape[1])
    patch = sm[y0:y1, x0:x1]
    w = patch - patch.min()
    if w.sum() <= 0:
        return complex(center.real + axis[ix], center.imag + axis[iy])
    yy, xx = np.meshgrid(axis[y0:y1], axis[x0:x1], indexing="ij")
    return complex(center.real + (w * xx).sum() / w.sum(), center.imag + (w * yy).sum() / w.sum())


# --- linecut fit ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LinecutFit:
    center: float
    uncertainty: float
    offset_perp: float  # fitted distance of the cut from the ring centre
    baseline: float
    contrast: float
    residual: float  # RMS misfit


def fit_linecut(
    coords,
    signals,
    *,
    scale: float,
    delta: float,
    tau: float,
    starts: int = 7,
    previous: float | None = None,
    max_residual: float = 0.15,
) -> LinecutFit:
    """Least-squares fit of the ring model along one axis.

    Model: S(x) = baseline + contrast * cos(2 pi delta_stark(scale * d, delta) tau)
    with d^2 = (x - x0)^2 + b^2; baseline, contrast and the perpendicular
    offset b are nuisance parameters. Starts for x0 are spread evenly over the
    scanned range; the lowest-cost solution wins, ties going to the one closest
    to ``previous``. With less than one fringe in the window the fit still runs
    (the central lobe alone constrains x0) but the uncertainty is larger.
    """
    x = np.asarray(coords, dtype=float)
    y = np.asarray(signals, dtype=float)
    if x.size < 15:
        raise FitError(f"need >= 15 linecut samples, got {x.size}")
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo

    def resid(p):
        x0, b, base, con = p
        return echo_signal((x - x0) ** 2 + b * b, scale, delta, tau, base, con) - y

    base0 = float(np.mean(y))
    con0 = max(float(np.ptp(y)) / 2, 1e-3)
    lower = [lo - 0.1 * span, 0.0, 0.0, 0.0]
    upper = [hi + 0.1 * span, span, 1.0, 1.0]
    candidates = []
    for x_start in np.linspace(lo, hi, starts):
        for b_start in (0.0, 0.1 * span):
            p0 = np.clip([x_start, b_start, base0, con0], lower, upper)
            try:
                sol = least_squares(
                    resid, p0, bounds=(lower, upper), x_scale=[span, span, 1.0, 1.0], xtol=1e-14, ftol=1e-14, gtol=1e-14
                )
            except ValueError:
                continue
            candidates.append(sol)
    if not candidates:
        raise FitError("linecut fit failed for every start")
    best_cost = min(s.cost for s in candidates)
    tied = [s for s in candidates if s.cost <= best_cost * (1 + 1e-9) + 1e-300]
    ref = previous if previous is not None else 0.5 * (lo + hi)
    sol = min(tied, key=lambda s: abs(s.x[0] - ref))

    x0, b, base, con = sol.x
    rms = math.sqrt(2 * sol.cost / x.size)
    if rms > max_residual:
        raise FitError(f"linecut residual {rms:.3g} above {max_residual}")
    if not lo <= x0 <= hi:
        raise FitError(f"fitted centre {x0:.4g} outside the scanned range [{lo:.4g}, {hi:.4g}]")
    dof = max(x.size - 4, 1)
    jac = sol.jac
    try:
        cov = np.linalg.pinv(jac.T @ jac) * (2 * sol.cost / dof)
        sigma = math.sqrt(max(cov[0, 0], 0.0))
    except np.linalg.LinAlgError:
        sigma = float("inf")
    return LinecutFit(float(x0), sigma, float(b), float(base), float(con), rms)


# --- calibration loop ------------------------------------------------------------------------


def calibrate_pair(
    device: DeviceModel,
    target: int,
    control: int,
    config: CalibrationConfig | None = None,
    rng: np.random.Generator | None = None,
) -> CalibrationResult:
    """Find the compensation phasor cancelling line ``control``'s leak onto ``target``.

    Stage 1 scans a square grid at tau_start and takes the smoothed maximum.
    Stage 2 alternates an x- and a y-linecut through the current estimate,
    refits the centre, and multiplies tau by tau_growth, until tau exceeds
    tau_max (capped at T2_echo / 4) or both the centre update and its fitted
    uncertainty fall below 0.1% of its magnitude.
    """
    config = config or CalibrationConfig()
    if target == control:
        raise ValueError("target and control must differ")
    delta = detuning(device, target, control)
    qubit = device.qubit(target)
    A = config.test_amplitude or auto_test_amplitude(config, delta, qubit.rabi_scale)
    scale = A * qubit.rabi_scale
    opts = SimOptions(shots=config.shots or device.readout_shots_default, rng=rng or _rng_for(device, target, control))
    # coherence caps the useful echo time
    tau_cap = min(config.tau_max, qubit.t2_echo / 4)
    schedule = [t for t in config.tau_schedule() if t <= tau_cap * (1 + 1e-12)] or [config.tau_start]

    evaluations = 0
    half = 2 * config.r_bound
    axis = np.linspace(-half, half, config.coarse_points)
    coarse = rings_scan(device, target, control, A, schedule[0], square_grid(0j, half, config.coarse_points), opts,
                        config.test_phase)
    evaluations += len(coarse)
    values = np.array([s.signal for s in coarse]).reshape(config.coarse_points, config.coarse_points)
    center = smoothed_peak(values, axis)
    log.debug("coarse centre %s", center)

    used: list[float] = []
    stage_sigma: list[float] = []
    residual = 0.0
    converged = False
    for k, tau in enumerate(schedule):
        omega_edge = min(omega_for_phase(config.fringes, tau, delta), config.max_omega_ratio * abs(delta))
        half_cut = omega_edge / scale
        new = center
        sig = []
        res = []
        for ax in ("x", "y"):
            fit, n = _fit_axis(device, target, control, A, tau, new, half_cut, ax, config, opts, scale, delta)
            evaluations += n
            new = complex(fit.center, new.imag) if ax == "x" else complex(new.real, fit.center)
            sig.append(fit.uncertainty)
            res.append(fit.residual)
        used.append(tau)
        stage_sigma.append(math.hypot(*sig))
        residual = math.sqrt(sum(r * r for r in res) / len(res))
        moved = abs(new - center)
        center = new
        if moved < 1e-3 * abs(center) and stage_sigma[-1] < 1e-3 * abs(center):
            converged = True
            break
    else:
        converged = config.tau_growth > 1 or len(used) < config.max_iterations

    result = CalibrationResult(
        control=control,
        target=target,
        comp=Phasor.from_complex(center),
        residual=residual,
        tau_schedule=used,
        evaluations=evaluations,
        converged=converged,
        uncertainty=stage_sigma[-1],
        stage_uncertainty=stage_sigma,
    )
    if not converged:
        log.warning("calibration %d->%d did not converge after %d iterations", control, target, len(used))
    return result


def _fit_axis(device, target, control, A, tau, center, half, axis, config, opts, scale, delta):
    """One linecut through ``center``; retried once with twice the points on fit failure."""
    points = config.linecut_points
    measured = 0
    for attempt in range(2):
        grid = linecut_grid(center, half, points, axis)
        samples = rings_scan(device, target, control, A, tau, grid, opts, config.test_phase)
        measured += len(samples)
        coords = [s.r.re if axis == "x" else s.r.im for s in samples]
        prev = center.real if axis == "x" else center.imag
        try:
            fit = fit_linecut(
                coords, [s.signal for s in samples], scale=scale, delta=delta, tau=tau, starts=config.starts, previous=prev
            )
            return fit, measured
        except FitError as exc:
            if attempt == 1:
                raise FitError(f"pair {control}->{target}, tau={tau} us, {axis}-linecut: {exc}") from exc
            points = 2 * points + 1


def calibrate_device(
    device: DeviceModel,
    config: CalibrationConfig | None = None,
    pairs: Iterable[tuple[int, int]] | None = None,
) -> list[CalibrationResult]:
    """Calibrate every (control, target) pair sharing a frequency band."""
    pairs = list(pairs) if pairs is not None else device.band_pairs()
    return [calibrate_pair(device, t, c, config) for c, t in pairs]


def compensation_table(results: Iterable[CalibrationResult]) -> dict[tuple[int, int], Phasor]:
    return {(r.control, r.target): r.comp for r in results}


# --- Ramsey verification ------------------------------------------------------------------------


@dataclass(frozen=True)
class FringeFit:
    frequency: float  # MHz
    uncertainty: float
    decay: float  # us
    residual: float


def fit_fringe_frequency(delays, signal) -> FringeFit:
    """Frequency of a damped Ramsey fringe: FFT peak, then a quadrature least-squares fit.

    Model: offset + exp(-t / T) * (a cos(2 pi f t) + b sin(2 pi f t)).
    """
    t = np.asarray(delays, dtype=float)
    y = np.asarray(signal, dtype=float)
    if t.size < 8:
        raise FitError("need >= 8 Ramsey points")
    span = t.max() - t.min()
    step = np.min(np.diff(np.sort(t)))
    n_fft = 1 << int(math.ceil(math.log2(16 * t.size)))
    grid = np.arange(t.min(), t.max() + step / 2, step)
    resampled = np.interp(grid, t, y) - y.mean()
    spectrum = np.abs(np.fft.rfft(resampled * np.hanning(grid.size), n_fft))
    freqs = np.fft.rfftfreq(n_fft, step)
    spectrum[freqs < 1.0 / span] = 0  # ignore the DC leakage region
    f0 = float(freqs[np.argmax(spectrum)])
    if f0 * span < 2:
        raise FitError(f"only {f0 * span:.2f} fringe periods in the delay range")

    def resid(p):
        f, rate, off, a, b = p
        env = np.exp(-rate * t)
        return off + env * (a * np.cos(2 * np.pi * f * t) + b * np.sin(2 * np.pi * f * t)) - y

    p0 = [f0, 1.0 / max(span, 1e-9), y.mean(), 0.5 * np.ptp(y), 0.0]
    sol = least_squares(resid, p0, bounds=([0, 0, -1, -1, -1], [np.inf, np.inf, 2, 1, 1]), xtol=1e-14, ftol=1e-14)
    f = float(sol.x[0])
    dof = max(t.size - 5, 1)
    cov = np.linalg.pinv(sol.jac.T @ sol.jac) * (2 * sol.cost / dof)
    rate = sol.x[1]
    return FringeFit(f, math.sqrt(max(cov[0, 0], 0.0)), 1 / rate if rate > 0 else float("inf"),
                     math.sqrt(2 * sol.cost / t.size))


def verify_ramsey(
    device: DeviceModel,
    target: int,
    control: int,
    amplitudes: Seq[float],
    comp: Phasor | None,
    delays: Seq[float],
    opts: SimOptions,
    artificial_detuning: float = ARTIFICIAL_DETUNING,
) -> list[tuple[float, float]]:
    """Ramsey-measured frequency shift of ``target`` for each test amplitude on ``control``.

    Returns (A, shift MHz) pairs. The fringe sits at artificial_detuning - shift,
    so shifts must stay below the artificial detuning in magnitude.
    """
    if len(amplitudes) < 2:
        raise ValueError("need >= 2 amplitudes")
    delays = np.asarray(delays, dtype=float)
    if (delays.max() - delays.min()) * artificial_detuning < 2:
        raise ValueError("delay grid must span >= 2 periods of the artificial detuning")
    qubit = device.qubit(target)
    out = []
    for A in amplitudes:
        signal = []
        for t in delays:
            seq = build_ramsey_sequence(target, control, float(t), A, comp, artificial_detuning, device)
            state = run_sequence(seq, device, opts, method="exact")
            signal.append(measure(state, seq.kind, seq.free_time, qubit, opts, device.spam_error))
        fit = fit_fringe_frequency(delays, signal)
        out.append((float(A), artificial_detuning - fit.frequency))
    return out


@dataclass(frozen=True)
class StarkSeriesFit:
    magnitude: float  # fitted |C| such that Omega = A |C| rabi_scale
    relative_residual: float  # RMS misfit / max |shift|
    slope_a2: float  # least-squares slope of shift vs A^2


def fit_stark_series(series: Seq[tuple[float, float]], delta: float, rabi_scale: float) -> StarkSeriesFit:
    """Fit shift(A) = stark(A |C| rabi_scale, delta) for the single unknown |C|."""
    a = np.array([p[0] for p in series], dtype=float)
    s = np.array([p[1] for p in series], dtype=float)
    a2 = a * a
    slope = float(a2 @ s / (a2 @ a2)) if a2 @ a2 > 0 else 0.0
    guess = math.sqrt(abs(2 * delta * slope)) / rabi_scale if slope else 1e-3

    def resid(p):
        return analytic_stark_shift(a * p[0] * rabi_scale, delta) - s

    sol = least_squares(resid, [max(guess, 1e-6)], bounds=([0], [1]))
    scale = np.max(np.abs(s))
    rel = math.sqrt(np.mean(sol.fun**2)) / scale if scale > 0 else 0.0
    return StarkSeriesFit(float(sol.x[0]), float(rel), slope)


# --- Stark matrix -------------------------------------------------------------------------------


def stark_matrix(
    device: DeviceModel,
    calibrations: Iterable[CalibrationResult],
    omega0: float,
    pairs: Iterable[tuple[int, int]] | None = None,
) -> list[StarkMatrixEntry]:
    """Shift on each target when its control is driven at Rabi frequency omega0.

    Entry (control j -> target i) = stark(|r*_ij| * omega0, f_i - f_j).
    ``pairs`` defaults to every calibrated pair.
    """
    if not omega0 > 0:
        raise ValueError("omega0 must be > 0")
    table = {(c.control, c.target): c for c in calibrations}
    pairs = list(pairs) if pairs is not None else sorted(table)
    entries = []
    for control, target in pairs:
        if (control, target) not in table:
            raise MissingCalibrationError(f"no calibration for control {control} -> target {target}")
        r = table[(control, target)].comp.magnitude()
        shift = analytic_stark_shift(r * omega0, detuning(device, target, control))
        entries.append(StarkMatrixEntry(control, target, float(shift)))
    return entries


def stark_matrix_array(n: int, entries: Iterable[StarkMatrixEntry]) -> np.ndarray:
    """n x n array indexed [target, control]; NaN where no entry exists."""
    m = np.full((n, n), np.nan)
    for e in entries:
        m[e.target, e.control] = e.shift
    return m


# --- calibration table file ------------------------------------------------------------------------

TABLE_COLUMNS = [
    "control",
    "target",
    "comp_magnitude",
    "comp_phase_deg",
    "comp_re",
    "comp_im",
    "residual",
    "evaluations",
    "converged",
    "tau_schedule_us",
]


def calibration_rows(results: Iterable[CalibrationResult]) -> list[list[str]]:
    rows = []
    for r in results:
        rows.append(
            [
                str(r.control),
                str(r.target),
                repr(r.comp.magnitude()),
                repr(r.comp.phase_deg()),
                repr(r.comp.re),
                repr(r.comp.im),
                repr(r.residual),
                str(r.evaluations),
                "1" if r.converged else "0",
                ";".join(repr(t) for t in r.tau_schedule),
            ]
        )
    return rows


def read_calibration_table(path) -> list[CalibrationResult]:
    """Parse a table written by the CLI (comment lines start with '#')."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or set(TABLE_COLUMNS) - set(reader.fieldnames):
        raise StarkcalError(f"{path}: not a calibration table (columns {reader.fieldnames})")
    out = []
    for row in reader:
        out.append(
            CalibrationResult(
                control=int(row["control"]),
                target=int(row["target"]),
                comp=Phasor(float(row["comp_re"]), float(row["comp_im"])),
                residual=float(row["residual"]),
                tau_schedule=[float(t) for t in row["tau_schedule_us"].split(";") if t],
                evaluations=int(row["evaluations"]),
                converged=row["converged"] == "1",
            )
        )
    return out
