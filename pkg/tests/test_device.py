import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from starkcal.device import (
    CrosstalkMatrix,
    DeviceModel,
    Phasor,
    QubitSpec,
    detuning,
    format_device,
    load_device,
    make_device,
    paper_example_device,
    pair_device,
    parse_device,
    save_device,
)
from starkcal.errors import DeviceFormatError, DeviceValidationError

TWO_QUBIT = """
[device]
rng_seed = 7
spam_error = 0.02

[[qubit]]
id = 0
frequency_ghz = 6.2497
t1_us = 45.0
t2_echo_us = 30.0
t2_ramsey_us = 12.0
rabi_scale_mhz = 33.3

[[qubit]]
id = 1
frequency_ghz = 6.2718
t1_us = 48.0
t2_echo_us = 30.0
t2_ramsey_us = 14.0
rabi_scale_mhz = 33.3

[[crosstalk]]
i = 0
j = 1
magnitude = 0.05
phase_deg = 30.0
"""


def test_phasor_basics():
    p = Phasor.from_polar(0.05, math.radians(30))
    assert p.magnitude() == pytest.approx(0.05)
    assert p.phase_deg() == pytest.approx(30)
    assert complex(-p) == -complex(p)
    assert Phasor(-1.0, 0.0).phase() == pytest.approx(math.pi)  # (-pi, pi]
    with pytest.raises(ValueError):
        Phasor(float("nan"), 0.0)
    with pytest.raises(ValueError):
        Phasor(0.0, float("inf"))


def test_phasor_components_are_plain_floats():
    p = Phasor(np.float64(0.1), np.float32(0.2))
    assert type(p.re) is float and type(p.im) is float


def test_load_two_qubit(tmp_path):
    f = tmp_path / "d.toml"
    f.write_text(TWO_QUBIT)
    d = load_device(f)
    assert d.n == 2
    e = d.crosstalk.entry(0, 1)
    assert e.magnitude() == pytest.approx(0.05)
    assert e.phase_deg() == pytest.approx(30.0)
    assert d.crosstalk.entry(1, 0).magnitude() == 0  # unlisted defaults to zero
    assert complex(d.crosstalk.entry(0, 0)) == 1


def test_diagonal_entry_rejected():
    text = TWO_QUBIT + "\n[[crosstalk]]\ni = 0\nj = 0\nmagnitude = 0.9\nphase_deg = 0.0\n"
    with pytest.raises(DeviceValidationError) as exc:
        parse_device(text)
    assert "diagonal" in str(exc.value)
    assert exc.value.field == "crosstalk[0][0]"


@pytest.mark.parametrize(
    "patch, error",
    [
        (("rabi_scale_mhz = 33.3", "rabi_scale_mhz = 33.3\ncolour = 1", 1), DeviceFormatError),
        (("[device]", "[device]\nfoo = 1", 1), DeviceFormatError),
        (("magnitude = 0.05", "magnitude = 1.5", 1), DeviceValidationError),
        (("t2_ramsey_us = 12.0", "t2_ramsey_us = 40.0", 1), DeviceValidationError),
        (("id = 1", "id = 0", 1), DeviceValidationError),
        (("frequency_ghz = 6.2497", "frequency_ghz = -1.0", 1), DeviceValidationError),
        (("spam_error = 0.02", "spam_error = 0.3", 1), DeviceValidationError),
        (("[[qubit]]", "[[qubit", 1), DeviceFormatError),
    ],
)
def test_malformed_or_invalid(patch, error):
    old, new, count = patch
    with pytest.raises(error):
        parse_device(TWO_QUBIT.replace(old, new, count))


def test_missing_file(tmp_path):
    with pytest.raises(DeviceFormatError):
        load_device(tmp_path / "nope.toml")


def test_qubit_invariants():
    with pytest.raises(DeviceValidationError):
        QubitSpec(0, 6.0, 10.0, 30.0, 5.0, 30.0)  # t2_echo > 2 t1
    with pytest.raises(DeviceValidationError):
        QubitSpec(0, 6.0, 10.0, 10.0, 5.0, 0.0)  # rabi_scale


def test_crosstalk_matrix_invariants():
    with pytest.raises(DeviceValidationError):
        CrosstalkMatrix(2, {(0, 1): (1.0, 0.0)})
    with pytest.raises(DeviceValidationError):
        CrosstalkMatrix(2, {(0, 2): (0.1, 0.0)})
    c = CrosstalkMatrix.from_array(np.array([[1, 0.02j], [0.03, 1]]))
    assert c.entry(0, 1).phase_deg() == pytest.approx(90)
    with pytest.raises(ValueError):
        c.as_array()[0, 1] = 0  # read-only


def test_detuning_paper_pair():
    d = pair_device()
    assert detuning(d, 0, 1) == pytest.approx(-22.1, abs=1e-9)
    assert detuning(d, 1, 0) == pytest.approx(22.1, abs=1e-9)


def test_detuning_symmetry():
    d = make_device([5.0, 5.0, 5.1])
    assert detuning(d, 0, 1) == 0
    assert detuning(d, 2, 0) == -detuning(d, 0, 2)
    with pytest.raises(DeviceValidationError):
        detuning(d, 0, 3)
    with pytest.raises(DeviceValidationError):
        detuning(d, 1, 1)


def test_paper_fixture():
    d = paper_example_device()
    assert d.n == 7
    assert d.qubit(1).frequency == 6.2718
    assert d.qubit(3).frequency == 6.2497
    assert abs(detuning(d, 3, 1)) == pytest.approx(22.1, abs=1e-9)
    assert detuning(d, 5, 3) == pytest.approx(5.5, abs=1e-9)
    bands = [q.band for q in d.qubits]
    assert bands == ["low", "high"] * 3 + ["low"]
    for q in d.qubits:
        assert (5.5 < q.frequency < 5.7) if q.band == "low" else (6.2 < q.frequency < 6.3)
    c = np.abs(d.crosstalk.as_array())
    off = c[~np.eye(7, dtype=bool)]
    assert off.min() >= 0 and off.max() <= 0.1
    for i in range(7):
        for j in range(7):
            if i != j and d.same_band(i, j):
                assert 0.01 <= c[i, j] <= 0.1
    # the 5.5 MHz pair carries the largest same-band leak
    same = [(c[i, j], (i, j)) for i in range(7) for j in range(7) if i != j and d.same_band(i, j)]
    assert max(same)[1] in {(3, 5), (5, 3)}


def test_band_pairs_count():
    d = paper_example_device()
    pairs = d.band_pairs()
    assert len(pairs) == 4 * 3 + 3 * 2
    assert all(d.same_band(c, t) for c, t in pairs)


@pytest.mark.parametrize("fixture", ["paper_7q.toml", "pair_2q.toml"])
def test_round_trip_bit_exact(tmp_path, fixture):
    from starkcal.device import DATA_DIR

    d = load_device(DATA_DIR / fixture)
    f = tmp_path / "out.toml"
    save_device(d, f)
    d2 = load_device(f)
    assert d2 == d
    assert format_device(d2) == format_device(d)
    assert np.array_equal(d2.crosstalk.as_array(), d.crosstalk.as_array())


@settings(max_examples=50, deadline=None)
@given(
    mag=st.floats(0, 0.999, allow_nan=False),
    phase=st.floats(-360, 360, allow_nan=False),
    f0=st.floats(4.0, 7.0),
    f1=st.floats(4.0, 7.0),
)
def test_round_trip_property(tmp_path_factory, mag, phase, f0, f1):
    d = make_device([f0, f1], {(0, 1): (mag, phase)}, rng_seed=3)
    f = tmp_path_factory.mktemp("rt") / "d.toml"
    save_device(d, f)
    d2 = load_device(f)
    assert d2.crosstalk.polar_entries() == d.crosstalk.polar_entries()
    assert [q.frequency for q in d2.qubits] == [f0, f1]
    assert detuning(d2, 0, 1) == -detuning(d2, 1, 0)


def test_device_is_immutable():
    d = pair_device()
    with pytest.raises(AttributeError):
        d.rng_seed = 3
    assert isinstance(d, DeviceModel)
