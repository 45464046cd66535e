"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 2 (argparse),
DataError exits 3, NumericalAbort exits 4.
"""


class DataError(Exception):
    """Unusable input data: bad files, degenerate label sets, empty stores."""


class SegmentationError(DataError):
    """A recording could not be segmented into cardiac cycles."""

    def __init__(self, recording_id: str, reason: str):
        self.recording_id = recording_id
        self.reason = reason
        super().__init__(f"{recording_id}: {reason}")


class NumericalAbort(Exception):
    """Training produced a non-finite loss and was aborted."""


class CheckpointError(Exception):
    """A checkpoint file is missing, truncated or malformed."""
