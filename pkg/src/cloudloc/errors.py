"""Exception types shared across the toolkit."""


class CloudlocError(Exception):
    """Base class for all toolkit errors."""


class EmptyInput(CloudlocError):
    """An operation received an empty point cloud or point set."""


class InsufficientPoints(CloudlocError):
    """Fewer points than an operation's k/K parameter requires."""


class InsufficientNegatives(CloudlocError):
    """Quadruplet loss needs at least two negatives."""


class ParseError(CloudlocError):
    """Malformed input file; carries the offending line or byte offset."""

    def __init__(self, message, line=None, byte_offset=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if byte_offset is not None:
            loc.append(f"byte {byte_offset}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.byte_offset = byte_offset


class ShapeError(CloudlocError):
    """Tensor shapes incompatible for the requested operation."""


class ContractViolation(CloudlocError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class TrainingDiverged(CloudlocError):
    """Loss became NaN/Inf during optimization."""


class DuplicateId(CloudlocError):
    """Database entry ids must be unique."""


class BadK(CloudlocError):
    """Retrieval k outside [1, database size]."""


class NoValidSegments(CloudlocError):
    """Every trajectory segment was dropped during query-cloud refinement."""


class EmptySubmap(CloudlocError):
    """A submap crop contains no surface to sample."""


class ConfigError(CloudlocError):
    """Run configuration is missing, malformed, or has unknown keys."""
