"""Exception hierarchy. Every error carries a stable ``code`` used by the CLI."""

from __future__ import annotations


class ExtSubError(Exception):
    code = "error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.details:
            out["details"] = self.details
        return out


class MalformedHeader(ExtSubError):
    code = "malformed_header"


class OffsetOverlap(ExtSubError):
    code = "offset_overlap"


class UnknownDtype(ExtSubError):
    code = "unknown_dtype"


class ShapeUnsupported(ExtSubError):
    code = "shape_unsupported"


class IoFailure(ExtSubError):
    code = "io_failure"


class UnpairedFactor(ExtSubError):
    code = "unpaired_factor"


class RankMismatch(ExtSubError):
    code = "rank_mismatch"


class OrientationAmbiguous(ExtSubError):
    code = "orientation_ambiguous"


class KeySetMismatch(ExtSubError):
    code = "key_set_mismatch"


class ShapeMismatch(ExtSubError):
    code = "shape_mismatch"


class RankTooLarge(ExtSubError):
    code = "rank_too_large"


class MalformedLine(ExtSubError):
    code = "malformed_line"


class InvalidPipeline(ExtSubError):
    code = "invalid_pipeline"


class InvalidArgument(ExtSubError):
    code = "invalid_argument"
