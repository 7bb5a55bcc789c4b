"""Exception hierarchy shared by all fnlab modules."""


class FnlabError(Exception):
    """Base class for every error raised by fnlab."""


class EmptyDataset(FnlabError, ValueError):
    pass


class InvalidTolerance(FnlabError, ValueError):
    pass


class DatasetTooSmall(FnlabError, ValueError):
    pass


class ShapeError(FnlabError, ValueError):
    pass


class EmptyBatch(FnlabError, ValueError):
    pass


class DivergenceError(FnlabError, ArithmeticError):
    pass


class CapacityExhausted(FnlabError):
    pass


class EmptyNeighborhood(FnlabError):
    pass


class InvalidScan(FnlabError, ValueError):
    pass


class InvalidRange(FnlabError, ValueError):
    pass


class FormatError(FnlabError):
    pass


class ConfigError(FnlabError, ValueError):
    pass
