"""Exception hierarchy shared by all semkit modules."""


class SemError(Exception):
    """Base class for every error raised by semkit."""


class InputError(SemError, ValueError):
    """Malformed user input: bad files, bad flags, bad shapes."""


class PipelineError(SemError, RuntimeError):
    """A numerical stage could not produce a result."""


# core geometry
class DegenerateLine(PipelineError):
    pass


class InsufficientMatches(PipelineError):
    pass


class DegenerateConfiguration(PipelineError):
    pass


# features / params
class BadDimensions(InputError):
    pass


class ScaleMismatch(InputError):
    pass


class ParamShapeMismatch(InputError):
    pass


class FormatError(InputError):
    """Binary or text file does not follow its declared layout."""


# attention / matching
class ShapeMismatch(InputError):
    pass


class EmptyRow(PipelineError):
    pass


# pipeline / synthetic
class EmptyGroundTruth(InputError):
    pass


class InfeasibleSpec(PipelineError):
    pass
