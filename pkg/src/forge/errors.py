"""Exception types raised across the toolkit."""


class ForgeError(Exception):
    """Base class for every error raised by forge."""


# arithmetic / ECDSA
class NonInvertible(ForgeError, ValueError):
    pass


class PointNotOnCurve(ForgeError, ValueError):
    pass


class DegenerateNonce(ForgeError, ValueError):
    """r or s came out zero; the caller must draw a fresh nonce."""


# masking
class ZeroMask(ForgeError, ValueError):
    pass


class InvalidMask(ForgeError, ValueError):
    pass


# datasets
class ConfigOutOfRange(ForgeError, ValueError):
    pass


class IoFailure(ForgeError, OSError):
    pass


class CorruptShard(ForgeError):
    pass


class UnknownVersion(ForgeError):
    pass


class DuplicateKeyAcrossSplits(ForgeError):
    pass


# tensors / model
class ShapeMismatch(ForgeError, ValueError):
    pass


class IndivisibleLength(ForgeError, ValueError):
    pass


class CyclicDag(ForgeError, ValueError):
    pass


class MissingDependency(ForgeError, ValueError):
    pass


class MissingLabel(ForgeError, KeyError):
    pass


# metrics
class EmptySet(ForgeError, ValueError):
    pass


class EmptyList(ForgeError, ValueError):
    pass


class PoolTooSmall(ForgeError, ValueError):
    pass


# lattice
class TooFewPairs(ForgeError, ValueError):
    pass


class RankDeficient(ForgeError, ValueError):
    pass


class TooFewRecords(ForgeError, ValueError):
    pass
