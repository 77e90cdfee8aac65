# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import logging


class QdeskError(Exception):
    """Base class of all errors raised by qdesk."""
    exit_code = 1


class InvalidInputError(QdeskError, ValueError):
    exit_code = 2


class ConfigError(InvalidInputError):
    pass


class InfeasibleBudgetError(InvalidInputError):

    def __init__(self, message, min_cost):
        super(InfeasibleBudgetError, self).__init__(message)
        self.min_cost = min_cost


class ContainerError(QdeskError, IOError):
    exit_code = 3


class NumericalError(QdeskError, ArithmeticError):
    exit_code = 4


class LayerQuantizationError(QdeskError):
    """Failure while quantizing one layer of the sweep."""

    def __init__(self, layer_id, cause):
        super(LayerQuantizationError, self).__init__(
            'quantizing layer %r failed: %s' % (layer_id, cause))
        self.layer_id = layer_id
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', NumericalError.exit_code)


def init_logging(level=logging.INFO):
    """Sets up logging for qdesk entry points.

    Call this in all entry points (if __name__ == "__main__").
    Sets the log level for all qdesk loggers to `level`,
    unless `level` is given as `None`.
    """
    format = '[%(levelname)1.1s %(module)s:%(lineno)d] %(message)s'
    logging.basicConfig(format=format, level=level)
    logging.captureWarnings(True)


def set_qdesk_log_level(level, set_main=True):
    """Set a log level for qdesk loggers"""
    logger.setLevel(level)
    if set_main:
        _baseLogger = logging.getLogger()
        _baseLogger.setLevel(level)


logger = logging.getLogger('qdesk')

debug = logger.debug
info = logger.info
warning = logger.warning
error = logger.error
exception = logger.exception
critical = logger.critical
