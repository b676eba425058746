"""Exception hierarchy. Every error carries a short machine-readable code used by the CLI."""


class PsegError(Exception):
    code = "error"


class ParameterError(PsegError, ValueError):
    code = "parameter_error"


class ShapeError(PsegError, ValueError):
    code = "shape_error"


class NumericError(PsegError, ArithmeticError):
    code = "numeric_error"


class SpecError(PsegError, ValueError):
    code = "spec_error"


class SamplingError(PsegError, ValueError):
    code = "sampling_error"


class DegenerateGraphError(NumericError):
    code = "degenerate_graph"


class UndefinedMetricError(PsegError, ValueError):
    code = "undefined_metric"


class FormatError(PsegError, ValueError):
    code = "format_error"


class ConfigError(PsegError, ValueError):
    code = "config_error"
