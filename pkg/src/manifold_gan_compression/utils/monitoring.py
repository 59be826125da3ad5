"""
Timing and outcome logging for pipeline stages and long-running operations.
"""

import time
import logging
import functools
from typing import Any, Callable, Dict, TypeVar

from .exceptions import GanPruneError

logger = logging.getLogger(__name__)

T = TypeVar('T')

STAGE_PREFIX = "stage:"


def _fields(operation: str) -> Dict[str, Any]:
    if operation.startswith(STAGE_PREFIX):
        return {"kind": "stage", "stage": operation[len(STAGE_PREFIX):]}
    return {"kind": "operation", "operation": operation}


def monitor_performance(operation: str):
    """
    Log the wall time and outcome of a stage (``"stage:<name>"``) or operation.

    Package errors are logged at warning level with their ``error_type`` and
    details, since stage runners turn them into error results. Anything else
    is logged with its traceback.

    Args:
        operation: ``"stage:<name>"`` for pipeline stages, a plain name otherwise
    """
    fields = _fields(operation)
    label = f"stage {fields['stage']}" if fields["kind"] == "stage" else operation

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> T:
            start = time.perf_counter()
            logger.debug(f"{label} started", extra=fields)
            try:
                result = func(*args, **kwargs)
            except GanPruneError as e:
                elapsed = time.perf_counter() - start
                logger.warning(
                    f"{label} stopped after {elapsed:.2f}s: {e.error_type}: {e.message}",
                    extra={**fields, "elapsed_s": elapsed, "ok": False,
                           "error_type": e.error_type, "details": e.details}
                )
                raise
            except Exception as e:
                elapsed = time.perf_counter() - start
                logger.exception(
                    f"{label} crashed after {elapsed:.2f}s: {e}",
                    extra={**fields, "elapsed_s": elapsed, "ok": False, "error_type": type(e).__name__}
                )
                raise

            elapsed = time.perf_counter() - start
            extra = {**fields, "elapsed_s": elapsed, "ok": True}
            if fields["kind"] == "stage" and isinstance(result, dict):
                extra["outputs"] = sorted(result)
            logger.info(f"{label} finished in {elapsed:.2f}s", extra=extra)
            return result

        return wrapper
    return decorator
