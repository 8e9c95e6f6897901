"""
Error kinds raised across the gradient-leakage lab.

Every module raises one of these instead of a bare Exception so the orchestration
layer can record a failed victim without aborting a whole experiment.
"""


class LabError(Exception):
    """Base class for all lab errors"""


class InvalidInput(LabError, ValueError):
    """Shapes, sizes or values do not satisfy an operation's precondition"""


class InvalidSpec(LabError, ValueError):
    """A model, privacy-module or attack specification is geometrically impossible"""


class InvalidMask(LabError, ValueError):
    """A layer mask selects no layer or names layers the model does not have"""


class NumericalFailure(LabError):
    """A loss, activation or gradient became NaN or infinite"""


class DegenerateGradient(LabError):
    """A zero-norm gradient was handed to the cosine distance"""


class AmbiguousLabel(LabError):
    """Label recovery found zero or several negative-sum classifier rows"""


class NoUsableRow(LabError):
    """All bias gradients of a dense layer are zero"""


class NoBias(LabError):
    """The analytic attack needs a dense layer with bias parameters"""


class CorruptDataset(LabError):
    """A dataset file has a bad magic number or an unexpected size"""


class ConfigError(LabError, ValueError):
    """An experiment configuration cannot be resolved"""
