# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import math
from typing import Any


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EXIT_REASONS = {
    EXIT_OK: "success",
    EXIT_USAGE: "usage error",
    EXIT_DATA: "data error",
    EXIT_NUMERIC: "numeric failure",
}


# ------------------------------------------------------------------------------
class ShapePriorError(Exception):
    rc = None
    __slots__ = ("msg",)

    def __init__(self, msg: str):
        super().__init__(msg)
        self.msg = msg

    def __str__(self):
        return "%s: %s" % (self.msg, EXIT_REASONS.get(self.rc, "error"))

    def __repr__(self):
        return "%s(%r)" % (type(self).__name__, self.msg)

    RC_CLASSES = {}

    @staticmethod
    def register(subclass):
        ShapePriorError.RC_CLASSES[subclass.rc] = subclass
        return subclass

    @staticmethod
    def new(msg: str, rc: int) -> "ShapePriorError":
        err_class = ShapePriorError.RC_CLASSES[rc]
        return err_class(msg)


# ------------------------------------------------------------------------------
@ShapePriorError.register
class ShapePriorUsageError(ShapePriorError, ValueError):
    rc = EXIT_USAGE


@ShapePriorError.register
class ShapePriorDataError(ShapePriorError, ValueError):
    rc = EXIT_DATA


@ShapePriorError.register
class ShapePriorNumericError(ShapePriorError, ArithmeticError):
    rc = EXIT_NUMERIC


# ------------------------------------------------------------------------------
def check_finite(value: Any, what: str = "value") -> float:
    """
    Convert a scalar (python number, numpy scalar or 1-element tensor) to float
    and make sure it is finite.

    :arg value:
        The scalar to check. Objects with an ``item()`` method are unwrapped.
    :arg what:
        Name of the quantity, used in the error message.

    :returns:
        The value as a python float.
    :raises ShapePriorNumericError:
        If the value is NaN or infinite.
    """
    if hasattr(value, "item"):
        value = value.item()
    value = float(value)
    if not math.isfinite(value):
        raise ShapePriorNumericError("%s is not finite (%r)" % (what, value))
    return value
