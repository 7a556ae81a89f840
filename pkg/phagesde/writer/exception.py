class WriterException(Exception):
    """Base class for exceptions in the writer module."""


class UnwritablePathException(WriterException):
    pass


class NoRowsException(WriterException):
    pass
