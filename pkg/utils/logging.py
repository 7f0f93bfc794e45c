import logging
import os
import sys
from pathlib import Path

try:
    from rich.logging import RichHandler  # type: ignore
    _HAS_RICH = True
except Exception:
    _HAS_RICH = False


_PLAIN_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Attributes every LogRecord carries, plus the ones RichHandler adds.
_RECORD_KEYS: frozenset[str] = frozenset(
    logging.LogRecord("", 0, "", 0, "", None, None).__dict__
) | {"message", "asctime", "markup", "highlighter"}

_PASSTHROUGH = frozenset({"exc_info", "stack_info", "stacklevel"})


def _render(value: object) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    try:
        return str(value)
    except Exception:
        return repr(value)


class ContextFormatter(logging.Formatter):
    """Appends bound context (step, cost, path...) to the message as ``key=value`` pairs."""

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        pairs = [
            f"{key}={rendered}"
            for key, value in vars(record).items()
            if key not in _RECORD_KEYS and not key.startswith("_")
            for rendered in (_render(value),)
            if rendered not in ("", "None")
        ]
        return f"{text} | {' '.join(pairs)}" if pairs else text


def _resolve_level(level: int | str | None) -> int:
    if level is None:
        level = os.getenv("LOG_LEVEL", "INFO")
    if isinstance(level, str):
        return getattr(logging, level.strip().upper(), logging.INFO)
    return int(level)


def _console_handler(pretty: bool | None) -> logging.Handler:
    if pretty is None:
        pretty = os.getenv("LOG_PRETTY", "1").lower() not in ("0", "false", "no")
    if pretty and _HAS_RICH and sys.stderr.isatty():
        handler: logging.Handler = RichHandler(
            rich_tracebacks=True, tracebacks_width=100, show_time=True, show_level=True, show_path=False
        )
        handler.setFormatter(ContextFormatter(fmt="%(message)s", datefmt="%H:%M:%S"))
    else:
        handler = logging.StreamHandler()
        handler.setFormatter(ContextFormatter(fmt=_PLAIN_FORMAT, datefmt="%H:%M:%S"))
    return handler


def setup_logging(level: int | str | None = None, *, pretty: bool | None = None) -> None:
    """Replace the root handlers with one console handler.

    ``level`` falls back to LOG_LEVEL (INFO), ``pretty`` to LOG_PRETTY (on).
    Pretty output needs rich and a terminal on stderr.
    """
    resolved = _resolve_level(level)
    root = logging.getLogger()
    for old in list(root.handlers):
        root.removeHandler(old)

    handler = _console_handler(pretty)
    handler.setLevel(resolved)
    root.setLevel(resolved)
    root.addHandler(handler)


def add_file_handler(path: str | Path) -> logging.Handler:
    """Mirror root logging into a plain-text file; returns the handler so callers can detach it."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(target, encoding="utf-8")
    handler.setLevel(logging.getLogger().level)
    handler.setFormatter(ContextFormatter(fmt=_PLAIN_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def remove_handler(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    try:
        handler.close()
    except Exception:
        pass


class BindAdapter(logging.LoggerAdapter):
    """Adapter carrying default context; unknown keyword arguments become extra fields."""

    def process(self, msg, kwargs):
        context = {**self.extra, **(kwargs.pop("extra", None) or {})}
        for key in [k for k in kwargs if k not in _PASSTHROUGH]:
            context[key] = kwargs.pop(key)
        if context:
            kwargs["extra"] = context
        return msg, kwargs


def get_logger(name: str | None = None, **ctx: object) -> logging.Logger:
    return BindAdapter(logging.getLogger(name or __name__), ctx)  # type: ignore[return-value]


def bind(logger: logging.Logger, **ctx: object) -> logging.Logger:
    """New logger with ``ctx`` merged over any context already bound."""
    if isinstance(logger, BindAdapter):
        return BindAdapter(logger.logger, {**logger.extra, **ctx})  # type: ignore[return-value]
    return BindAdapter(logger, ctx)  # type: ignore[return-value]


def exception(logger: logging.Logger, msg: str, **ctx: object) -> None:
    """ERROR with the active traceback attached."""
    logger.error(msg, exc_info=True, **({"extra": ctx} if ctx else {}))
