"""Exception hierarchy shared across the package."""


class FunmonError(Exception):
    """Base class for everything raised deliberately by funmon."""


class InvalidConfiguration(FunmonError, ValueError):
    """A parameter or parameter combination violates a documented precondition."""


class OutOfDomain(FunmonError, ValueError):
    """An evaluation point lies outside the basis domain."""


class RankDeficientDesign(FunmonError):
    """The unpenalized normal equations are singular."""


class UndefinedGcv(FunmonError):
    """GCV denominator vanished with nonzero residual; no value is defined."""


class SelectionFailure(FunmonError):
    """No candidate in a selection grid produced an admissible criterion value."""


class InsufficientSample(FunmonError, ValueError):
    """Too few observations for the requested fit."""


class InvalidData(FunmonError, ValueError):
    """Input data contain non-finite or otherwise unusable entries."""


class DegenerateModel(FunmonError):
    """A fitted model has no usable variance structure."""


class DegenerateComponent(FunmonError):
    """A retained principal component has zero variance."""


class DegenerateCovariateDirection(FunmonError):
    """A covariate score direction has zero variance; regression is undefined."""


class MissingComponent(FunmonError):
    """An observation lacks data for one or more functional components."""


class CannotInitializeImputation(FunmonError):
    """No fully observed rows are available to fit the imputation model."""


class InfeasibleWarp(FunmonError):
    """No alignment path satisfies the slope constraints."""


class InvalidWarp(FunmonError, ValueError):
    """A warping function violates strict monotonicity."""


class NotYetMonitorable(FunmonError):
    """The observed fraction is below the smallest monitored domain point."""


class CalibrationFailure(FunmonError):
    """Control-limit calibration could not bracket the target run length."""


class IncompatibleModel(FunmonError):
    """A stored model does not match the shape of the supplied data."""


class SchemaError(FunmonError, ValueError):
    """An input file does not follow the documented schema."""


class ParseError(FunmonError, ValueError):
    """A record in an input file could not be parsed."""


class DuplicateRecord(FunmonError, ValueError):
    """Two records share the same (obs_id, component, t) key."""


class UnsupportedVersion(FunmonError):
    """A model archive was written by an unknown format version."""


class IntegrityError(FunmonError):
    """A model archive is corrupted or was modified after writing."""


class NotFound(FunmonError, KeyError):
    """A requested object (observation id, file) does not exist."""
