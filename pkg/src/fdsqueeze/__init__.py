"""Frequency-dependent conditional squeezing: EPR light plus an atomic spin oscillator."""

from .errors import (
    CsvParseError,
    DegenerateDataError,
    DegenerateFitError,
    DomainError,
    FdsqueezeError,
    GridMismatchError,
    ParameterError,
    RecordLengthError,
    SingularEvaluationError,
    ZeroSpectrumError,
)
from .params import (
    CavityParams,
    DetectionConfig,
    EprParams,
    FrequencyGrid,
    ModelParams,
    SpectrumSeries,
    SpinParams,
)

__version__ = "0.1.0"

__all__ = [
    "CavityParams", "DetectionConfig", "EprParams", "FrequencyGrid", "ModelParams", "SpectrumSeries",
    "SpinParams", "FdsqueezeError", "ParameterError", "SingularEvaluationError", "ZeroSpectrumError",
    "DomainError", "RecordLengthError", "GridMismatchError", "CsvParseError", "DegenerateFitError",
    "DegenerateDataError", "__version__",
]
