import logging

import pytest

from manifold_gan_compression.utils.exceptions import DataError
from manifold_gan_compression.utils.monitoring import monitor_performance

LOGGER = "manifold_gan_compression.utils.monitoring"


def _records(caplog):
    return [r for r in caplog.records if r.name == LOGGER]


def test_stage_success_lists_outputs(caplog):
    @monitor_performance("stage:gen-data")
    def stage():
        return {"split_sizes": {}, "dataset": "."}

    with caplog.at_level(logging.INFO, logger=LOGGER):
        stage()
    (record,) = _records(caplog)
    assert record.getMessage().startswith("stage gen-data finished")
    assert record.kind == "stage" and record.stage == "gen-data"
    assert record.ok is True
    assert record.outputs == ["dataset", "split_sizes"]
    assert record.elapsed_s >= 0.0


def test_package_error_is_a_warning(caplog):
    @monitor_performance("evaluate")
    def operation():
        raise DataError("empty split", details={"split": "val"})

    with caplog.at_level(logging.INFO, logger=LOGGER), pytest.raises(DataError):
        operation()
    (record,) = _records(caplog)
    assert record.levelno == logging.WARNING
    assert record.kind == "operation" and record.operation == "evaluate"
    assert record.error_type == "DataError"
    assert record.details == {"split": "val"}
    assert record.exc_info is None


def test_unexpected_error_keeps_traceback(caplog):
    @monitor_performance("stage:prune")
    def stage():
        raise RuntimeError("boom")

    with caplog.at_level(logging.INFO, logger=LOGGER), pytest.raises(RuntimeError):
        stage()
    (record,) = _records(caplog)
    assert record.levelno == logging.ERROR
    assert record.error_type == "RuntimeError"
    assert record.exc_info is not None
