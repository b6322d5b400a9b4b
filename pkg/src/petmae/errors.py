"""Exception hierarchy shared by every petmae module.

All errors derive from :class:`PetMaeError`; the CLI maps them to exit code 2.
Shape and value problems also subclass :class:`ValueError` so generic callers
can catch them without importing this module.
"""


class PetMaeError(Exception):
    """Base class for data and configuration errors."""


class NiftiError(PetMaeError, ValueError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class BadDims(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class MultiChannel(NiftiError):
    pass


class IoFailure(PetMaeError, OSError):
    pass


class ShapeMismatch(PetMaeError, ValueError):
    pass


class LabelMismatch(PetMaeError, ValueError):
    pass


class AllBlank(PetMaeError, ValueError):
    pass


class InvalidSpacing(PetMaeError, ValueError):
    pass


class ConstantImage(PetMaeError, ValueError):
    pass


class NonDivisible(PetMaeError, ValueError):
    pass


class BadConfig(PetMaeError, ValueError):
    pass


class BadShape(PetMaeError, ValueError):
    pass


class NonScalarLoss(PetMaeError, ValueError):
    pass


class EmptyCorpus(PetMaeError, ValueError):
    pass


class BadOverlap(PetMaeError, ValueError):
    pass


class CheckpointError(PetMaeError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptManifest(CheckpointError):
    pass


class BlobOutOfBounds(CheckpointError):
    pass
