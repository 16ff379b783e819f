"""Exception hierarchy shared by every stage of the pipeline."""


class RegionSplatError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RegionSplatError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(InvalidInputError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class UnsupportedModelError(InvalidInputError):
    """Camera model other than PINHOLE / SIMPLE_PINHOLE."""


class InvalidSpecError(InvalidInputError):
    """Degenerate synthetic scene description."""


class EmptyRegionError(RegionSplatError):
    """A region ended up with no points; reduce the region count."""


class PartitionError(RegionSplatError):
    def __init__(self, region_id, message):
        self.region_id = region_id
        super().__init__(f"region {region_id}: {message}")


class ContractViolation(RegionSplatError):
    """Internal invariant or caller contract broken (unsorted splats, mismatched caches...)."""


class InvalidPlaneError(InvalidInputError):
    pass


class TrainingDivergenceError(RegionSplatError):
    def __init__(self, message, iteration=None, gaussian=None):
        self.iteration = iteration
        self.gaussian = gaussian
        super().__init__(message)


class TrainingCollapseError(RegionSplatError):
    """Density control removed every Gaussian."""


class MergeError(RegionSplatError):
    pass
