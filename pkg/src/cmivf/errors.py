"""Exception hierarchy shared by every cmivf module."""


class CmivfError(Exception):
    """Base class for all errors raised by cmivf."""


class DimensionMismatch(CmivfError, ValueError):
    pass


class ZeroVector(CmivfError, ValueError):
    pass


class DomainError(CmivfError, ValueError):
    pass


class ConfigError(CmivfError, ValueError):
    pass


class InvalidK(CmivfError, ValueError):
    pass


class EmptyPairs(CmivfError, ValueError):
    pass


class InvalidNProbe(CmivfError, ValueError):
    pass


class SingleCentroid(CmivfError, ValueError):
    pass


class TooFewAugmentations(CmivfError, ValueError):
    pass


class EmptyResult(CmivfError, ValueError):
    pass


class NotADistribution(CmivfError, ValueError):
    pass


class FormatError(CmivfError):
    """Raised when a CMEB/CMIV file is malformed (bad magic, version, truncation)."""
