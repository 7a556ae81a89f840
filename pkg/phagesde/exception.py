class PhageSdeException(Exception):
    """Base class for exceptions raised by phagesde."""


class ModelException(PhageSdeException):
    pass


class DomainException(ModelException):
    """Raised when a model function is evaluated outside its domain."""


class HypothesisViolationException(ModelException):
    """Raised when a quantity only exists under a hypothesis that does not hold."""


class InputException(PhageSdeException):
    pass


class GridException(InputException):
    pass


class HistoryLookupException(InputException):
    pass


class InsufficientDataException(InputException):
    pass


class IntegrationException(PhageSdeException):
    def __init__(self, message: str, last_valid_time: float):
        super().__init__(message)
        self.last_valid_time = last_valid_time


class ConcentrationException(PhageSdeException):
    pass


class ConfigException(PhageSdeException):
    pass
