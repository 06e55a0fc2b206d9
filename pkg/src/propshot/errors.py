"""Exception types shared across the pipeline.

Every error raised on a contract violation derives from PropshotError so the
CLI can map them onto its exit-code scheme in one place.
"""


class PropshotError(Exception):
    """Base class for all propshot errors."""


class ArgumentError(PropshotError):
    """A caller-supplied argument is out of its documented range."""


class ShapeMismatch(PropshotError):
    """Operands have incompatible shapes."""


class NonScalarLoss(PropshotError):
    """backward() was asked to differentiate a non-scalar value."""


class DegenerateVector(PropshotError):
    """A vector with near-zero norm reached a normalization step."""


class FormatError(PropshotError):
    """A tensor file has a bad magic, version, or dtype, or corrupt content."""


class ShapeHeaderMismatch(PropshotError):
    """A tensor file's header shape disagrees with its payload size."""


class ChecksumError(PropshotError):
    """A tensor file's payload does not match its stored CRC32."""


class ValidationError(PropshotError):
    """A bundle or description set violates an invariant; the message names it."""


class EmptyClass(PropshotError):
    """A class contributes no descriptions to the pool."""


class EmptyInput(PropshotError):
    """A scoring operation received an empty vector set."""


class NoPositives(PropshotError):
    """A class owns no descriptions in any cluster, so it cannot be supervised."""


class DegeneratePrototype(PropshotError):
    """A prototype mean collapsed to (near) zero and cannot be normalized."""


class NonFiniteLoss(PropshotError):
    """Training produced a NaN/Inf loss; message carries epoch/step context."""
