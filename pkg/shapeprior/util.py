# Copyright (c) 2026 shapeprior contributors
# SPDX-License-Identifier: BSD-3-Clause

import hashlib
import json
import logging
import os
from typing import Any, Dict, Optional
import zlib

import numpy as np


# ------------------------------------------------------------------------------
LOG = logging.getLogger("shapeprior")
LOG.addHandler(logging.NullHandler())
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_STDERR_HANDLER = None
_FILE_HANDLER = None


# ------------------------------------------------------------------------------
def configure_logging(
    *,
    stderr_level: int = logging.NOTSET,
    log_file: Optional[str] = None,
    file_level: int = logging.INFO,
):
    """
    Configure logging for shapeprior. By default, all logging is disabled.

    All *_level arguments take standard python logging levels.

    :arg stderr_level:
        The level for standard error logging. If set to logging.NOTSET, standard error
        logging is disabled (the default).
    :arg log_file:
        Optional path of a file receiving log records. Any previously configured
        file handler is removed.
    :arg file_level:
        The level for file logging.
    """
    global _STDERR_HANDLER, _FILE_HANDLER  # pylint: disable=global-statement

    if _STDERR_HANDLER is not None:
        LOG.removeHandler(_STDERR_HANDLER)
        _STDERR_HANDLER = None
    if stderr_level != logging.NOTSET:
        _STDERR_HANDLER = logging.StreamHandler()
        _STDERR_HANDLER.setLevel(stderr_level)
        _STDERR_HANDLER.setFormatter(logging.Formatter(LOG_FORMAT))
        LOG.addHandler(_STDERR_HANDLER)

    if _FILE_HANDLER is not None:
        LOG.removeHandler(_FILE_HANDLER)
        _FILE_HANDLER.close()
        _FILE_HANDLER = None
    if log_file is not None:
        _FILE_HANDLER = logging.FileHandler(log_file, encoding="utf-8")
        _FILE_HANDLER.setLevel(file_level)
        _FILE_HANDLER.setFormatter(logging.Formatter(LOG_FORMAT))
        LOG.addHandler(_FILE_HANDLER)

    levels = [h.level for h in (_STDERR_HANDLER, _FILE_HANDLER) if h is not None]
    LOG.setLevel(min(levels) if levels else logging.WARNING)


# ------------------------------------------------------------------------------
def get_stderr_level() -> int:
    """
    Return current stderr log level.

    :returns int:
        The log level, logging.NOTSET when stderr logging is disabled.
    """
    if _STDERR_HANDLER is None:
        return logging.NOTSET
    return _STDERR_HANDLER.level


# ------------------------------------------------------------------------------
def rng_stream(seed: int, name: str) -> np.random.Generator:
    """
    Named random sub-stream. The same (seed, name) pair always yields the same
    sequence, whatever the other streams consumed.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


# ------------------------------------------------------------------------------
def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------------------
def get_version() -> str:
    here = os.path.dirname(__file__)
    try:
        with open(os.path.join(here, "VERSION"), "r", encoding="utf-8") as f:
            return f.read().strip()
    except IOError:
        pass
    try:
        from importlib import metadata  # pylint: disable=import-outside-toplevel

        return metadata.version("shapeprior")
    except Exception:  # pylint: disable=broad-except
        return "1.999999.999999"


# ------------------------------------------------------------------------------
def version_stamp() -> Dict[str, Any]:
    import scipy  # pylint: disable=import-outside-toplevel

    from .ndgrad import default_dtype  # pylint: disable=import-outside-toplevel

    return {
        "shapeprior": get_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "dtype": np.dtype(default_dtype()).name,
    }


# ------------------------------------------------------------------------------
def write_json(path: str, data: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
