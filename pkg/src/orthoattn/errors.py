"""Exceptions for the binary artifact formats (OFB1 banks, OCK1 checkpoints, IDX)."""


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class DimMismatchError(FormatError):
    pass
