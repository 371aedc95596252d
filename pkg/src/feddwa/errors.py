"""Exception types shared across the package."""


class FedDwaError(Exception):
    """Base class for all package errors."""


class LayoutError(FedDwaError):
    """Parameter vectors with incompatible layouts were combined."""


class DataError(FedDwaError):
    """Malformed dataset, infeasible partition, or bad file contents."""


class ConfigError(FedDwaError):
    """Invalid run configuration; message names the offending key."""


class SolverError(FedDwaError):
    """Numerical solver received an input outside its contract."""


class TrainingDiverged(FedDwaError):
    """Local training produced a non-finite loss or parameter."""
