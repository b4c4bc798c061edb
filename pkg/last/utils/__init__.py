import hashlib
import logging
import os
import sys
import tempfile

from last.errors import ConfigurationError

logger = logging.getLogger("last")
logger.addHandler(logging.NullHandler())

_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


def log(message, level="info"):
    """Send ``message`` to the package logger with the ``LAST:`` prefix."""
    if level not in _LEVELS:
        raise ValueError("Unknown log level %s" % level)
    logger.log(_LEVELS[level], "LAST: %s" % message)


def enable_console_logging(level="info"):
    """Attach a stream handler to the package logger (used by the CLI)."""
    # at most one console handler, bound to the current sys.stderr
    for handler in list(logger.handlers):
        if getattr(handler, "_last_console", False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    handler.setLevel(_LEVELS[level])
    handler._last_console = True
    logger.addHandler(handler)
    logger.setLevel(_LEVELS[level])
    return handler


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        mode="wb", dir=directory, prefix=os.path.basename(path) + ".", suffix=".tmp", delete=False
    ) as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(handle.name, path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path, chunk_size=1 << 20):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_concurrency(value=None):
    """Explicit value, else the ``LAST_THREADS`` environment variable, else 1."""
    if value is None:
        value = os.environ.get("LAST_THREADS") or 1
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigurationError("Concurrency must be an integer, got %r" % (value,))
    if value < 1:
        raise ConfigurationError("Concurrency must be at least 1, got %i" % value)
    return value
