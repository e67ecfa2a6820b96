"""Exception taxonomy for the lieq package.

Every error raised on a user-facing path derives from LieqError so callers
(and the CLI exit-code mapping) can distinguish bad input from internal bugs.
"""

from __future__ import annotations


class LieqError(Exception):
    """Base class for all lieq input and validation errors."""


class IoError(LieqError):
    """Filesystem-level failure while reading or writing an artifact."""


class MagicMismatch(LieqError):
    """File does not start with the expected magic string."""

    def __init__(self, expected: bytes, found: bytes, path: str = "") -> None:
        self.expected = expected
        self.found = found
        self.path = path
        where = f" in {path}" if path else ""
        super().__init__(
            f"bad magic{where}: expected {expected!r}, found {found!r}"
        )


class UnsupportedVersion(LieqError):
    """File format version is newer than this implementation understands."""


class SchemaMismatch(LieqError):
    """JSON document is not the expected kind or schema version."""


class ChecksumMismatch(LieqError):
    """Payload checksum does not match the stored value."""

    def __init__(self, expected: int, found: int, path: str = "") -> None:
        self.expected = expected
        self.found = found
        where = f" in {path}" if path else ""
        super().__init__(
            f"payload checksum mismatch{where}: "
            f"stored 0x{expected:08x}, computed 0x{found:08x}"
        )


class ShapeMismatch(LieqError):
    """A tensor is missing, unexpected, or has the wrong shape."""

    def __init__(self, name: str, detail: str = "") -> None:
        self.name = name
        msg = f"tensor {name!r}: shape mismatch"
        if detail:
            msg = f"tensor {name!r}: {detail}"
        super().__init__(msg)


class NonFiniteWeight(LieqError):
    """A checkpoint tensor contains NaN or infinity."""

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"tensor {name!r} contains non-finite values")


class NonFiniteInput(LieqError):
    """A numeric input array contains NaN or infinity."""


class TokenOutOfRange(LieqError):
    """A token id is outside the declared vocabulary bound."""

    def __init__(self, sequence: int, position: int, token: int, bound: int) -> None:
        self.sequence = sequence
        self.position = position
        self.token = token
        self.bound = bound
        super().__init__(
            f"sequence {sequence}, position {position}: "
            f"token id {token} is not < vocab bound {bound}"
        )


class EmptySequence(LieqError):
    """A corpus record has zero tokens."""

    def __init__(self, sequence: int) -> None:
        self.sequence = sequence
        super().__init__(f"sequence {sequence} is empty")


class EmptyCorpus(LieqError):
    """The corpus holds no sequences at all."""


class EmptyBucket(LieqError):
    """No corpus sequence falls inside a requested length bucket."""

    def __init__(self, bucket: tuple[int, int]) -> None:
        self.bucket = bucket
        super().__init__(f"no sequence with length in [{bucket[0]}, {bucket[1]}]")


class SequenceTooShort(LieqError):
    """Scoring needs at least two tokens (one prediction)."""


class SequenceTooLong(LieqError):
    """Sequence exceeds the model's maximum supported length."""


class LayerOutOfRange(LieqError):
    """A layer index is outside [0, n_layers)."""

    def __init__(self, layer: int, n_layers: int) -> None:
        self.layer = layer
        self.n_layers = n_layers
        super().__init__(f"layer index {layer} not in [0, {n_layers})")


class AllZeroSpectrum(LieqError):
    """Every singular value of an activation matrix is (numerically) zero."""


class LengthMismatch(LieqError):
    """Two paired vectors have different lengths."""


class ZeroVariance(LieqError):
    """Rank correlation is undefined when one input is constant."""


class DegenerateMetric(LieqError):
    """A diagnostic column is all zero, so normalization is undefined."""

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"metric {name!r} is identically zero across layers")


class WeightSumInvalid(LieqError):
    """Score weights must be non-negative and sum to one."""


class MOutOfRange(LieqError):
    """Requested number of high-precision layers is outside [0, n_layers]."""

    def __init__(self, m: int, n_layers: int) -> None:
        self.m = m
        self.n_layers = n_layers
        super().__init__(f"m={m} not in [0, {n_layers}]")


class UnsupportedBitWidth(LieqError):
    """Bit width not in the supported set."""


class CodeOutOfRange(LieqError):
    """A quantized code does not fit in the declared bit width."""


class PlanLengthMismatch(LieqError):
    """Bit plan length disagrees with the model's layer count."""

    def __init__(self, plan_len: int, n_layers: int) -> None:
        self.plan_len = plan_len
        self.n_layers = n_layers
        super().__init__(
            f"plan covers {plan_len} layers but model has {n_layers}"
        )


class ArchMismatch(LieqError):
    """Two artifacts disagree on architecture or provenance."""


class DimsTooLarge(LieqError):
    """Fixture dimensions exceed the desk-scale guard rails."""


class UnsupportedFormat(LieqError):
    """Report format is not one of the supported emitters."""
