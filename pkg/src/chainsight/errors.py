"""Exception hierarchy.

Everything raised on purpose derives from ``ChainsightError``. The CLI maps
``InputError`` subclasses to exit code 1 and ``StorageError`` to exit code 2.
"""


class ChainsightError(Exception):
    pass


class InputError(ChainsightError):
    """Bad data or bad configuration; the run cannot continue."""


class StorageError(ChainsightError):
    """Filesystem or network I/O failure."""


# ingest
class MalformedRecord(InputError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed record at line {line_no}: {reason}")


class MissingField(InputError):
    def __init__(self, name, line_no=None):
        self.name = name
        self.line_no = line_no
        where = f" at line {line_no}" if line_no is not None else ""
        super().__init__(f"missing field {name!r}{where}")


class RpcError(StorageError):
    def __init__(self, code, message=""):
        self.code = code
        super().__init__(f"rpc error {code}: {message}")


class RangeGap(InputError):
    def __init__(self, number):
        self.number = number
        super().__init__(f"node has no block {number}")


class UnknownSeries(InputError):
    pass


# ledger
class BlockOutOfOrder(InputError):
    pass


# properties
class CoverageGap(InputError):
    def __init__(self, tick_time):
        self.tick_time = tick_time
        super().__init__(f"no market data for tick {tick_time}")


class TooShort(InputError):
    pass


# distributions
class UnknownFeature(InputError):
    pass


# datasetgen
class DegenerateSeries(InputError):
    pass


class NonScalarProperty(InputError):
    pass


class EmptySplit(InputError):
    pass


class MissingProperty(InputError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"missing property series {name!r}")


class BadMagic(InputError):
    pass


class VersionMismatch(InputError):
    pass


class TruncatedPayload(InputError):
    pass


# modeling
class TargetNotInWindow(InputError):
    pass


class ShapeMismatch(InputError):
    pass


class NonFiniteGradient(ChainsightError):
    pass


class EmptyDataset(InputError):
    pass


# cli
class MissingInput(InputError):
    def __init__(self, stage, what=""):
        self.stage = stage
        super().__init__(f"{stage}: missing input {what}".rstrip())


class ConfigError(InputError):
    def __init__(self, field, reason=""):
        self.field = field
        super().__init__(f"config field {field!r}: {reason}")
