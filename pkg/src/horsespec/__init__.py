"""Entropy spectra of Lyapunov exponents for a horseshoe with a prescribed discontinuity.

Modules: :mod:`symbolic` (shift combinatorics), :mod:`construction` (constants
and the potential), :mod:`thermo` (pressure and equilibrium measures),
:mod:`spectrum` (entropy spectrum, rotation sets), :mod:`horseshoe` (finite
surgery stages) and :mod:`cli`.
"""
from .construction import DEFAULTS, ConstructionParams
from .errors import (
    ConfigurationError,
    CoreViolation,
    DomainError,
    HorsespecError,
    Infeasible,
    InvalidArgument,
    NumericalFailure,
    ResourceLimit,
    ShrinkRates,
    VerificationFailure,
)

__version__ = "0.1.0"
