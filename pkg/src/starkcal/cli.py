"""Command-line campaign runner.

Each subcommand loads a device file, runs one experiment and writes
comma-separated data files with a commented header (device hash, seed and
parameters). All outputs of a command are computed first and then moved into
place, so a failing command leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from starkcal import __version__
from starkcal.calibration import (
    TABLE_COLUMNS,
    CalibrationConfig,
    _rng_for,
    auto_test_amplitude,
    calibrate_pair,
    calibration_rows,
    compensation_table,
    fit_stark_series,
    linecut_grid,
    read_calibration_table,
    rings_scan,
    square_grid,
    stark_matrix,
    stark_matrix_array,
    verify_ramsey,
)
from starkcal.device import DATA_DIR, DeviceModel, Phasor, detuning, device_hash, load_device
from starkcal.dynamics import SimOptions
from starkcal.errors import StarkcalError
from starkcal.rb import DEFAULT_DEPOLARIZING, MODES, RAW_COLUMNS, SUMMARY_COLUMNS, rb_rows, run_rb, summary_rows

log = logging.getLogger("starkcal")

_RAMSEY_STREAM = 201


@dataclass
class CampaignConfig:
    device_path: Path
    out_dir: Path
    seed: int | None
    workers: int
    command: str
    params: dict = field(default_factory=dict)

    def validate(self):
        if not self.device_path.is_file():
            raise StarkcalError(f"device file {self.device_path} does not exist")
        if self.workers < 1:
            raise StarkcalError("--workers must be >= 1")
        if self.out_dir.exists() and not self.out_dir.is_dir():
            raise StarkcalError(f"output path {self.out_dir} is not a directory")

    def load(self) -> DeviceModel:
        device = load_device(self.device_path)
        if self.seed is not None:
            device = replace(device, rng_seed=self.seed)
        return device

    def header(self, device: DeviceModel) -> list[str]:
        lines = [
            f"starkcal {__version__} {self.command}",
            f"device: {self.device_path.name} sha256={device_hash(self.device_path)}",
            f"seed: {device.rng_seed}",
        ]
        lines += [f"param {k}: {v}" for k, v in sorted(self.params.items())]
        return lines


# --- output -----------------------------------------------------------------------------------


def _csv_text(header: list[str], columns: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def write_outputs(out_dir: Path, files: dict[str, str]) -> list[Path]:
    """Write every file to a temporary name first, then rename them all."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
            staged.append((tmp, out_dir / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            Path(tmp).unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return [final for _, final in staged]


# --- parsing helpers --------------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _range(text: str) -> list[float]:
    """start:stop:count, inclusive."""
    try:
        start, stop, count = text.split(":")
        values = np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:count, got {text!r}") from None
    if int(count) < 2:
        raise argparse.ArgumentTypeError("range needs >= 2 points")
    return [float(v) for v in values]


def _pairs(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            c, t = item.split(":")
            out.append((int(c), int(t)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected control:target pairs, got {item!r}") from None
    return out


# --- commands ---------------------------------------------------------------------------------


def cmd_scan(cfg: CampaignConfig, args) -> dict[str, str]:
    device = cfg.load()
    if args.points < 1:
        raise StarkcalError("--points must be >= 1")
    if args.half_width < 0:
        raise StarkcalError("--half-width must be >= 0")
    if args.linecut and args.points < 2:
        raise StarkcalError("a linecut needs >= 2 points")
    taus = args.tau
    if any(t <= 0 for t in taus):
        raise StarkcalError("--tau values must be > 0")
    if not args.linecut and len(taus) != 1:
        raise StarkcalError("a 2D scan takes exactly one --tau")
    target, control = args.target, args.control
    delta = detuning(device, target, control)
    qubit = device.qubit(target)
    amplitude = args.amplitude
    if amplitude is None:
        geometry = CalibrationConfig(
            tau_start=min(taus), tau_max=2 * max(taus), r_bound=max(args.half_width, 1e-6) / 2,
            coarse_points=max(args.points, 3),
        )
        amplitude = auto_test_amplitude(geometry, delta, qubit.rabi_scale)
    cfg.params.update(amplitude=repr(amplitude))
    center = complex(args.center_re, args.center_im)
    rng = None if args.exact else _rng_for(device, 301, target, control)
    opts = SimOptions(shots=args.shots or device.readout_shots_default, rng=rng)
    stem = f"scan_t{target}_c{control}"
    if args.linecut:
        rows = []
        for tau in taus:
            grid = linecut_grid(center, args.half_width, args.points, args.linecut)
            for s in rings_scan(device, target, control, amplitude, tau, grid, opts):
                value = s.r.re if args.linecut == "x" else s.r.im
                rows.append([repr(value), repr(tau), repr(s.signal)])
        text = _csv_text(cfg.header(device), [f"r_{args.linecut}", "tau_us", "signal"], rows)
        return {f"{stem}_{args.linecut}cut.csv": text}
    samples = rings_scan(device, target, control, amplitude, taus[0], square_grid(center, args.half_width, args.points),
                         opts)
    rows = [[repr(s.r.re), repr(s.r.im), repr(s.signal)] for s in samples]
    return {f"{stem}.csv": _csv_text(cfg.header(device), ["r_x", "r_y", "signal"], rows)}


def _calibrate_job(job):
    device, target, control, config = job
    return calibrate_pair(device, target, control, config)


def cmd_calibrate(cfg: CampaignConfig, args) -> dict[str, str]:
    device = cfg.load()
    config = CalibrationConfig(
        test_amplitude=args.amplitude,
        tau_start=args.tau_start,
        tau_max=args.tau_max,
        r_bound=args.r_bound,
        shots=args.shots,
    )
    pairs = args.pairs if args.pairs is not None else device.band_pairs()
    for c, t in pairs:
        device.qubit(c)
        device.qubit(t)
        if c == t:
            raise StarkcalError(f"pair {c}:{t} has control equal to target")
    jobs = [(device, t, c, config) for c, t in pairs]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_calibrate_job, jobs))
    else:
        results = [_calibrate_job(j) for j in jobs]
    return {"calibration.csv": _csv_text(cfg.header(device), TABLE_COLUMNS, calibration_rows(results))}


def _comp_from_table(path, control: int, target: int) -> Phasor:
    for r in read_calibration_table(path):
        if (r.control, r.target) == (control, target):
            return r.comp
    raise StarkcalError(f"{path} has no entry for control {control} -> target {target}")


def cmd_verify(cfg: CampaignConfig, args) -> dict[str, str]:
    device = cfg.load()
    target, control = args.target, args.control
    if args.calibration is not None:
        comp = _comp_from_table(args.calibration, control, target)
    elif args.comp is not None:
        comp = Phasor.from_complex(complex(*args.comp))
    else:
        raise StarkcalError("verify needs --calibration or --comp")
    qubit = device.qubit(target)
    delta = detuning(device, target, control)
    shots = args.shots or device.readout_shots_default
    series_rows, fit_rows = [], []
    for state, phasor in (("uncompensated", None), ("compensated", comp)):
        opts = SimOptions(shots=shots, rng=_rng_for(device, _RAMSEY_STREAM, target, control, state == "compensated"))
        series = verify_ramsey(device, target, control, args.amplitudes, phasor, args.delays, opts,
                               args.artificial_detuning)
        series_rows += [[state, repr(a), repr(s)] for a, s in series]
        fit = fit_stark_series(series, delta, qubit.rabi_scale)
        fit_rows.append([state, repr(fit.magnitude), repr(fit.relative_residual), repr(fit.slope_a2),
                         repr(max(abs(s) for _, s in series))])
    header = cfg.header(device)
    return {
        f"ramsey_t{target}_c{control}.csv": _csv_text(header, ["state", "amplitude", "shift_mhz"], series_rows),
        f"ramsey_fit_t{target}_c{control}.csv": _csv_text(
            header, ["state", "fitted_magnitude", "relative_residual", "slope_a2", "max_abs_shift_mhz"], fit_rows
        ),
    }


def cmd_rb(cfg: CampaignConfig, args) -> dict[str, str]:
    device = cfg.load()
    table = compensation_table(read_calibration_table(args.calibration))
    qubits = args.qubits if args.qubits is not None else [q.id for q in device.qubits]
    results = []
    for mode in MODES:
        results += run_rb(
            device,
            qubits,
            mode,
            args.lengths,
            args.sequences,
            table,
            shots=args.shots,
            depolarizing=args.depolarizing,
            workers=cfg.workers,
        )
    header = cfg.header(device)
    return {
        "rb_raw.csv": _csv_text(header, RAW_COLUMNS, rb_rows(results)),
        "rb_summary.csv": _csv_text(header + ["EPG values are fractions, reduction in percent"], SUMMARY_COLUMNS,
                                    summary_rows(results)),
    }


def cmd_stark_matrix(cfg: CampaignConfig, args) -> dict[str, str]:
    device = cfg.load()
    entries = stark_matrix(device, read_calibration_table(args.calibration), args.omega0)
    m = stark_matrix_array(device.n, entries)
    columns = ["target"] + [f"control_{j}" for j in range(device.n)]
    rows = [[str(i)] + ["NA" if np.isnan(v) else repr(float(v)) for v in m[i]] for i in range(device.n)]
    header = cfg.header(device) + ["shift in MHz of target (row) when control (column) is driven at omega0"]
    return {"stark_matrix.csv": _csv_text(header, columns, rows)}


def cmd_fixture(cfg: CampaignConfig, args) -> dict[str, str]:
    name = {"paper": "paper_7q.toml", "pair": "pair_2q.toml"}[args.which]
    return {name: (DATA_DIR / name).read_text()}


# --- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--device", type=Path, help="device TOML file")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory (default: .)")
    common.add_argument("--seed", type=int, default=None, help="override the device's rng_seed")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
    common.add_argument("--shots", type=int, default=None, help="shots per point (default: device value)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="starkcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"starkcal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", parents=[common], help="echo signal over a grid of compensation phasors")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--control", type=int, required=True)
    p.add_argument("--tau", type=_float_list, default=[0.5], help="echo half time(s) in us")
    p.add_argument("--amplitude", type=float, default=None, help="test amplitude (default: automatic)")
    p.add_argument("--points", type=int, default=41, help="points per axis")
    p.add_argument("--half-width", type=float, default=0.4)
    p.add_argument("--center-re", type=float, default=0.0)
    p.add_argument("--center-im", type=float, default=0.0)
    p.add_argument("--linecut", choices=("x", "y"), default=None, help="scan one axis for each tau instead")
    p.add_argument("--exact", action="store_true", help="write exact probabilities instead of shot estimates")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate all same-band pairs")
    p.add_argument("--pairs", type=_pairs, default=None, help="control:target,... (default: all same-band)")
    p.add_argument("--amplitude", type=float, default=None)
    p.add_argument("--tau-start", type=float, default=0.5)
    p.add_argument("--tau-max", type=float, default=4.0)
    p.add_argument("--r-bound", type=float, default=0.2)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", parents=[common], help="Ramsey shift vs test amplitude, with and without compensation")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--control", type=int, required=True)
    p.add_argument("--calibration", type=Path, default=None, help="calibration table")
    p.add_argument("--comp", type=float, nargs=2, default=None, metavar=("RE", "IM"))
    p.add_argument("--amplitudes", type=_float_list, default=[0.25 * k for k in range(1, 9)])
    p.add_argument("--delays", type=_range, default=_range("0.1:8.0:80"), help="start:stop:count in us")
    p.add_argument("--artificial-detuning", type=float, default=0.5, help="MHz")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rb", parents=[common], help="separate, simultaneous and compensated RB")
    p.add_argument("--calibration", type=Path, required=True)
    p.add_argument("--qubits", type=_int_list, default=None)
    p.add_argument("--lengths", type=_int_list, default=[2**k for k in range(1, 10)])
    p.add_argument("--sequences", type=int, default=30)
    p.add_argument("--depolarizing", type=float, default=DEFAULT_DEPOLARIZING)
    p.set_defaults(func=cmd_rb)

    p = sub.add_parser("stark-matrix", parents=[common], help="Stark shift matrix from a calibration table")
    p.add_argument("--calibration", type=Path, required=True)
    p.add_argument("--omega0", type=float, default=33.0, help="control Rabi frequency, MHz")
    p.set_defaults(func=cmd_stark_matrix)

    p = sub.add_parser("fixture", parents=[common], help="write a shipped device file")
    p.add_argument("which", choices=("paper", "pair"))
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    params = {
        k: v
        for k, v in vars(args).items()
        if k not in ("func", "device", "out", "seed", "workers", "verbose", "command") and v is not None
    }
    if args.command != "fixture" and args.device is None:
        parser.error("--device is required")
    cfg = CampaignConfig(
        device_path=args.device or DATA_DIR / "pair_2q.toml",
        out_dir=args.out,
        seed=args.seed,
        workers=args.workers,
        command=args.command,
        params={k: repr(v) if not isinstance(v, Path) else str(v) for k, v in params.items()},
    )
    try:
        cfg.validate()
        files = args.func(cfg, args)
        written = write_outputs(cfg.out_dir, files)
    except (StarkcalError, ValueError, KeyError, OSError) as exc:
        print(f"starkcal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
