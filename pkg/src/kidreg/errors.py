"""Exception hierarchy shared by all kidreg modules."""


class KidregError(Exception):
    """Base class for all kidreg errors."""


class InvalidParameterError(KidregError):
    """A numeric argument is non-finite or out of its allowed range."""


class ConfigurationError(KidregError):
    """A configuration object or argument combination is inconsistent."""


class SizeError(KidregError):
    """Array/grid shapes do not satisfy an operation's contract."""


class EmptyMaskError(KidregError):
    """A mask required to be nonempty contains no foreground."""


class EmptyContourError(KidregError):
    """A contour required to be nonempty has no points."""


class DegenerateInputError(KidregError):
    """Input is formally valid but numerically unusable (e.g. NaN loss)."""
