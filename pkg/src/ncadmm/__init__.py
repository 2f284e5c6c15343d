"""Nonconvex ADMM for consensus and sharing problems."""

from .calibration import (ComplexityConstants, PenaltyParams, calibrate_consensus,
                          calibrate_proximal, calibrate_sharing, calibrate_two_block,
                          complexity_constants, modulus_lower_bound)
from .consensus import InnerConfig, SolverConfig, run_consensus
from .errors import (CalibrationError, CheckViolation, InnerSolverError, NcadmmError,
                     NumericalError, ValidationError)
from .problems import ConsensusProblem, SharingProblem, TwoBlockProblem, validate
from .schedules import cyclic, full_sweep, randomized
from .state import ConsensusState, RunResult, SharingState, TwoBlockState

__version__ = "0.1.0"
