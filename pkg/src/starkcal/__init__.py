"""Stark-shift based microwave crosstalk calibration for fixed-frequency qubits."""

from starkcal.device import (
    CrosstalkMatrix,
    DeviceModel,
    Phasor,
    QubitSpec,
    detuning,
    load_device,
    make_device,
    paper_example_device,
    pair_device,
    save_device,
)
from starkcal.dynamics import (
    QubitState,
    SimOptions,
    analytic_stark_shift,
    approx_stark_shift,
    dressed_splitting_oracle,
    simulate,
)
from starkcal.calibration import (
    CalibrationConfig,
    CalibrationResult,
    calibrate_device,
    calibrate_pair,
    rings_scan,
    stark_matrix,
    verify_ramsey,
)
from starkcal.rb import RBResult, crosstalk_error_reduction, fit_rb_decay, run_rb, sample_clifford_sequence

__version__ = "0.1.0"
