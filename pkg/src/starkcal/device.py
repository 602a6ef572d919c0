"""Simulated device description: qubits, drive-line crosstalk and readout noise.

Device files are TOML documents::

    [device]
    name = "two-qubit pair"
    rng_seed = 20220101
    spam_error = 0.02
    readout_shots = 1000

    [[qubit]]
    id = 0
    band = "high"
    frequency_ghz = 6.2497
    t1_us = 40.0
    t2_echo_us = 30.0
    t2_ramsey_us = 15.0
    rabi_scale_mhz = 33.333333333333336

    [[crosstalk]]
    i = 0              # qubit receiving the leak
    j = 1              # line emitting the signal
    magnitude = 0.05
    phase_deg = 137.0

Unlisted off-diagonal entries are zero and diagonal entries are fixed to 1.
Unknown keys anywhere in the document are rejected.
"""

from __future__ import annotations

import cmath
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from starkcal.errors import DeviceFormatError, DeviceValidationError

_DEVICE_KEYS = {"name", "rng_seed", "spam_error", "readout_shots"}
_QUBIT_KEYS = {
    "id",
    "band",
    "frequency_ghz",
    "t1_us",
    "t2_echo_us",
    "t2_ramsey_us",
    "rabi_scale_mhz",
}
_CROSSTALK_KEYS = {"i", "j", "magnitude", "phase_deg"}
_TOP_KEYS = {"device", "qubit", "crosstalk"}

DEFAULT_SPAM_ERROR = 0.02
DEFAULT_SHOTS = 1000


@dataclass(frozen=True)
class Phasor:
    """Complex amplitude-and-phase factor (dimensionless)."""

    re: float
    im: float

    def __post_init__(self):
        object.__setattr__(self, "re", float(self.re))
        object.__setattr__(self, "im", float(self.im))
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError(f"phasor components must be finite, got ({self.re}, {self.im})")

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        z = complex(z)
        return cls(z.real, z.imag)

    @classmethod
    def from_polar(cls, magnitude: float, phase: float) -> "Phasor":
        """Build from a magnitude and a phase in radians."""
        return cls.from_complex(cmath.rect(magnitude, phase))

    @classmethod
    def zero(cls) -> "Phasor":
        return cls(0.0, 0.0)

    def magnitude(self) -> float:
        return math.hypot(self.re, self.im)

    def phase(self) -> float:
        """Argument in (-pi, pi]."""
        p = math.atan2(self.im, self.re)
        return math.pi if p == -math.pi else p

    def phase_deg(self) -> float:
        return math.degrees(self.phase())

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def __neg__(self) -> "Phasor":
        return Phasor(-self.re, -self.im)

    def __add__(self, other: "Phasor") -> "Phasor":
        return Phasor(self.re + other.re, self.im + other.im)


@dataclass(frozen=True)
class QubitSpec:
    id: int
    frequency: float  # GHz
    t1: float  # us
    t2_echo: float  # us
    t2_ramsey: float  # us
    rabi_scale: float  # MHz of peak Rabi frequency per unit amplitude
    band: str = "default"

    def __post_init__(self):
        for name in ("frequency", "t1", "t2_echo", "t2_ramsey", "rabi_scale"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DeviceValidationError(f"qubit {self.id}: {name}", f"must be finite and > 0, got {value}")
        if not self.t2_ramsey <= self.t2_echo:
            raise DeviceValidationError(f"qubit {self.id}: t2_ramsey", "requires t2_ramsey <= t2_echo")
        if not self.t2_echo <= 2 * self.t1:
            raise DeviceValidationError(f"qubit {self.id}: t2_echo", "requires t2_echo <= 2*t1")


class CrosstalkMatrix:
    """Line-to-qubit leakage. ``entry(i, j)`` is how line ``j`` appears at qubit ``i``.

    Entries are kept in the polar form they were given in, so that writing a
    loaded device back out reproduces the file's numbers exactly.
    """

    def __init__(self, n: int, polar: Mapping[tuple[int, int], tuple[float, float]] | None = None):
        if n < 1:
            raise DeviceValidationError("crosstalk.n", "need at least one qubit")
        self.n = n
        self._polar: dict[tuple[int, int], tuple[float, float]] = {}
        values = np.eye(n, dtype=complex)
        for (i, j), (mag, phase_deg) in sorted((polar or {}).items()):
            if not (0 <= i < n and 0 <= j < n):
                raise DeviceValidationError(f"crosstalk[{i}][{j}]", f"index outside 0..{n - 1}")
            if i == j:
                raise DeviceValidationError(
                    f"crosstalk[{i}][{j}]", "diagonal entries are fixed to 1+0i and may not be set"
                )
            if not (math.isfinite(mag) and math.isfinite(phase_deg)):
                raise DeviceValidationError(f"crosstalk[{i}][{j}]", "magnitude and phase must be finite")
            if not 0 <= mag < 1:
                raise DeviceValidationError(f"crosstalk[{i}][{j}]", f"magnitude must be in [0, 1), got {mag}")
            self._polar[(i, j)] = (float(mag), float(phase_deg))
            values[i, j] = cmath.rect(mag, math.radians(phase_deg))
        values.setflags(write=False)
        self._values = values

    @classmethod
    def from_array(cls, values: np.ndarray) -> "CrosstalkMatrix":
        values = np.asarray(values, dtype=complex)
        n = values.shape[0]
        if values.shape != (n, n):
            raise DeviceValidationError("crosstalk", "matrix must be square")
        for i in range(n):
            if values[i, i] != 1:
                raise DeviceValidationError(f"crosstalk[{i}][{i}]", "diagonal must be exactly 1+0i")
        polar = {
            (i, j): (abs(values[i, j]), math.degrees(cmath.phase(values[i, j])))
            for i in range(n)
            for j in range(n)
            if i != j and values[i, j] != 0
        }
        return cls(n, polar)

    @classmethod
    def zeros(cls, n: int) -> "CrosstalkMatrix":
        return cls(n, {})

    def entry(self, i: int, j: int) -> Phasor:
        return Phasor.from_complex(self._values[i, j])

    def polar_entries(self) -> dict[tuple[int, int], tuple[float, float]]:
        return dict(self._polar)

    def as_array(self) -> np.ndarray:
        """Read-only complex n x n array."""
        return self._values

    def __eq__(self, other):
        return isinstance(other, CrosstalkMatrix) and self.n == other.n and self._polar == other._polar

    def __repr__(self):
        return f"CrosstalkMatrix(n={self.n}, entries={len(self._polar)})"


@dataclass(frozen=True)
class DeviceModel:
    qubits: tuple[QubitSpec, ...]
    crosstalk: CrosstalkMatrix
    readout_shots_default: int = DEFAULT_SHOTS
    rng_seed: int = 0
    spam_error: float = DEFAULT_SPAM_ERROR
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(self.qubits))
        ids = [q.id for q in self.qubits]
        if sorted(ids) != list(range(len(ids))):
            raise DeviceValidationError("qubit.id", f"ids must be unique and dense 0..n-1, got {ids}")
        if ids != sorted(ids):
            object.__setattr__(self, "qubits", tuple(sorted(self.qubits, key=lambda q: q.id)))
        if self.crosstalk.n != len(self.qubits):
            raise DeviceValidationError("crosstalk.n", f"{self.crosstalk.n} != number of qubits {len(ids)}")
        if not 0 <= self.spam_error <= 0.1:
            raise DeviceValidationError("spam_error", f"must be in [0, 0.1], got {self.spam_error}")
        if self.readout_shots_default < 1:
            raise DeviceValidationError("readout_shots", "must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise DeviceValidationError("rng_seed", "must be a 64-bit unsigned integer")

    @property
    def n(self) -> int:
        return len(self.qubits)

    def qubit(self, qid: int) -> QubitSpec:
        if not isinstance(qid, (int, np.integer)) or not 0 <= qid < self.n:
            raise DeviceValidationError("qubit id", f"invalid qubit id {qid!r}")
        return self.qubits[qid]

    def same_band(self, a: int, b: int) -> bool:
        return self.qubit(a).band == self.qubit(b).band

    def band_pairs(self) -> list[tuple[int, int]]:
        """All ordered (control, target) pairs that share a frequency band."""
        return [
            (c, t)
            for c in range(self.n)
            for t in range(self.n)
            if c != t and self.same_band(c, t)
        ]

    def with_crosstalk(self, crosstalk: CrosstalkMatrix) -> "DeviceModel":
        return DeviceModel(
            self.qubits, crosstalk, self.readout_shots_default, self.rng_seed, self.spam_error, self.name
        )


def detuning(device: DeviceModel, target: int, control: int) -> float:
    """Signed detuning ``f_target - f_control`` in MHz."""
    if target == control:
        raise DeviceValidationError("qubit id", "target and control must differ")
    return (device.qubit(target).frequency - device.qubit(control).frequency) * 1e3


def _check_keys(table: Mapping, allowed: set, where: str):
    unknown = set(table) - allowed
    if unknown:
        raise DeviceFormatError(f"unknown key(s) {sorted(unknown)} in {where}")


def _require(table: Mapping, key: str, kind, where: str):
    if key not in table:
        raise DeviceFormatError(f"missing key {key!r} in {where}")
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise DeviceFormatError(f"{where}.{key} must be {kind.__name__}, got {type(value).__name__}")
    return value


def parse_device(text: str) -> DeviceModel:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise DeviceFormatError(f"malformed device file: {exc}") from exc
    _check_keys(doc, _TOP_KEYS, "document")
    header = doc.get("device", {})
    if not isinstance(header, dict):
        raise DeviceFormatError("[device] must be a table")
    _check_keys(header, _DEVICE_KEYS, "[device]")

    qubit_tables = doc.get("qubit", [])
    if not isinstance(qubit_tables, list) or not qubit_tables:
        raise DeviceFormatError("device file needs at least one [[qubit]] table")
    qubits = []
    for k, qt in enumerate(qubit_tables):
        where = f"qubit[{k}]"
        _check_keys(qt, _QUBIT_KEYS, where)
        qubits.append(
            QubitSpec(
                id=_require(qt, "id", int, where),
                frequency=_require(qt, "frequency_ghz", float, where),
                t1=_require(qt, "t1_us", float, where),
                t2_echo=_require(qt, "t2_echo_us", float, where),
                t2_ramsey=_require(qt, "t2_ramsey_us", float, where),
                rabi_scale=_require(qt, "rabi_scale_mhz", float, where),
                band=qt.get("band", "default"),
            )
        )

    polar = {}
    for k, ct in enumerate(doc.get("crosstalk", [])):
        where = f"crosstalk[{k}]"
        _check_keys(ct, _CROSSTALK_KEYS, where)
        key = (_require(ct, "i", int, where), _require(ct, "j", int, where))
        if key in polar:
            raise DeviceFormatError(f"duplicate crosstalk entry {key}")
        polar[key] = (_require(ct, "magnitude", float, where), _require(ct, "phase_deg", float, where))

    return DeviceModel(
        qubits=tuple(qubits),
        crosstalk=CrosstalkMatrix(len(qubits), polar),
        readout_shots_default=header.get("readout_shots", DEFAULT_SHOTS),
        rng_seed=header.get("rng_seed", 0),
        spam_error=float(header.get("spam_error", DEFAULT_SPAM_ERROR)),
        name=header.get("name", ""),
    )


def load_device(path) -> DeviceModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DeviceFormatError(f"cannot read device file {path}: {exc}") from exc
    return parse_device(text)


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_device(device: DeviceModel) -> str:
    lines = [
        "[device]",
        f"name = {_toml_str(device.name)}",
        f"rng_seed = {device.rng_seed}",
        f"spam_error = {device.spam_error!r}",
        f"readout_shots = {device.readout_shots_default}",
    ]
    for q in device.qubits:
        lines += [
            "",
            "[[qubit]]",
            f"id = {q.id}",
            f"band = {_toml_str(q.band)}",
            f"frequency_ghz = {q.frequency!r}",
            f"t1_us = {q.t1!r}",
            f"t2_echo_us = {q.t2_echo!r}",
            f"t2_ramsey_us = {q.t2_ramsey!r}",
            f"rabi_scale_mhz = {q.rabi_scale!r}",
        ]
    for (i, j), (mag, phase_deg) in sorted(device.crosstalk.polar_entries().items()):
        lines += [
            "",
            "[[crosstalk]]",
            f"i = {i}",
            f"j = {j}",
            f"magnitude = {mag!r}",
            f"phase_deg = {phase_deg!r}",
        ]
    return "\n".join(lines) + "\n"


def save_device(device: DeviceModel, path) -> None:
    Path(path).write_text(format_device(device))


def device_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


DATA_DIR = Path(__file__).parent / "data"


def paper_example_device() -> DeviceModel:
    """Seven-qubit chain with interleaved ~5.6 / ~6.2 GHz bands.

    Only the frequencies of Q2, Q4 (indices 1, 3) and the 5.5 MHz Q4-Q6
    spacing are taken from the measured device; the crosstalk matrix and the
    remaining frequencies are synthetic.
    """
    return load_device(DATA_DIR / "paper_7q.toml")


def pair_device() -> DeviceModel:
    """Two-qubit subsystem: target Q0 at 6.2497 GHz, control Q1 at 6.2718 GHz."""
    return load_device(DATA_DIR / "pair_2q.toml")


def make_device(
    frequencies_ghz: Iterable[float],
    crosstalk: Mapping[tuple[int, int], tuple[float, float]] | None = None,
    *,
    bands: Iterable[str] | None = None,
    t1: float = 60.0,
    t2_echo: float = 30.0,
    t2_ramsey: float = 15.0,
    rabi_scale: float = 1e3 / 30.0,
    spam_error: float = DEFAULT_SPAM_ERROR,
    rng_seed: int = 0,
    shots: int = DEFAULT_SHOTS,
    name: str = "",
) -> DeviceModel:
    """Convenience constructor; crosstalk given as ``{(i, j): (magnitude, phase_deg)}``."""
    freqs = list(frequencies_ghz)
    bands = list(bands) if bands is not None else ["default"] * len(freqs)
    qubits = tuple(
        QubitSpec(k, f, t1, t2_echo, t2_ramsey, rabi_scale, band=b) for k, (f, b) in enumerate(zip(freqs, bands))
    )
    return DeviceModel(qubits, CrosstalkMatrix(len(freqs), crosstalk or {}), shots, rng_seed, spam_error, name)
