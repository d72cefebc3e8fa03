"""
Error types for density-match.

Everything the toolkit raises on purpose lives here, grouped by what the
CLI does with it:

  UsageError      → exit code 1 (bad config, bad shapes, bad arguments)
  NumericalError  → exit code 2 (non-finite loss, failed gradient check)
  DataIOError     → exit code 3 (missing files, broken manifests/checkpoints)
"""


class DensityMatchError(Exception):
    """Base class for every error raised by this package."""


# ─── USAGE ───

class UsageError(DensityMatchError, ValueError):
    """The caller asked for something that can't work (bad config, bad args)."""


class ShapeError(UsageError):
    """Tensor shapes, dims, channels or geometry don't line up."""


class InfeasibleSceneError(UsageError):
    """A synthetic scene whose blobs can't fit inside the image."""


class EmptySplitError(UsageError):
    """A split fraction leaves one side of the split empty."""


# ─── NUMERICS ───

class NumericalError(DensityMatchError, ArithmeticError):
    """Something went numerically wrong (NaN/Inf, zero bandwidth, etc.)."""


class DomainError(NumericalError):
    """log/div called with an operand outside its domain."""


class DegenerateBandwidthError(NumericalError):
    """All KDE samples are identical, so the nearest-neighbour bandwidth is 0."""


class DivergenceInfiniteError(NumericalError):
    """KL[p‖q] is +inf because q_i = 0 where p_i > 0."""


class NonFiniteLossError(NumericalError):
    """A training loss term came out NaN/Inf."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite {term} loss ({value})")


class GradcheckFailure(NumericalError):
    """At least one op's gradient disagrees with central differences."""


# ─── DATA / IO ───

class DataIOError(DensityMatchError, OSError):
    """Files on disk are missing, malformed or inconsistent."""


class MissingFileError(DataIOError):
    pass


class SizeMismatchError(DataIOError):
    """An image and its mask have different sizes."""


class LabelRangeError(DataIOError):
    """A mask holds a class id ≥ num_classes."""


class EmptyDatasetError(DataIOError):
    pass


class CheckpointFormatError(DataIOError):
    pass


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(error, UsageError):
        return 1
    if isinstance(error, NumericalError):
        return 2
    if isinstance(error, (DataIOError, OSError)):
        return 3
    return 1
