"""Spin-complex ODMR simulation and spin-Hamiltonian fitting for hBN emitters."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DomainError,
    IngestError,
    ModelError,
    SpinSimError,
    UnderdeterminedError,
)
from .spin import FieldVector, Label, PairModel, ZfsParams  # noqa: F401
from .photodynamics import MwDrive, RateParams  # noqa: F401
