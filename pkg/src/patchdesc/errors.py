"""Exception hierarchy shared by all modules."""


class PatchDescError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(PatchDescError, ValueError):
    pass


class DegenerateGeometry(PatchDescError):
    pass


class InsufficientSupport(PatchDescError):
    pass


class EmptyDataset(PatchDescError):
    pass


class ArchMismatch(PatchDescError, ValueError):
    pass


class InvalidParams(PatchDescError, ValueError):
    pass


class InvalidCache(PatchDescError):
    pass


class InvalidConfig(PatchDescError, ValueError):
    pass


class DivergenceError(PatchDescError, FloatingPointError):
    pass


class EmptyDescriptorSet(PatchDescError):
    pass


class InsufficientRank(PatchDescError):
    pass


class FormatError(PatchDescError, ValueError):
    """A persisted file is malformed (bad magic, truncation, CRC mismatch...)."""
