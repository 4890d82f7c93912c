import logging
import sys

import pytest

from svmframe.config import settings
from svmframe.logger import LOGGER_NAME, logger, set_quiet, setup_logger


@pytest.fixture
def fresh_logger(monkeypatch):
    yield monkeypatch
    monkeypatch.undo()
    setup_logger()


def test_console_handler_keeps_stdout_clean():
    console = [h for h in logger.handlers if not isinstance(h, logging.FileHandler)]
    assert len(console) == 1
    assert console[0].stream not in (sys.stdout, sys.__stdout__)
    assert logger.name == LOGGER_NAME and not logger.propagate


def test_log_file_is_opened_on_first_record(tmp_path, fresh_logger):
    path = tmp_path / "logs" / "run.log"
    fresh_logger.setattr(settings, "log_file", str(path))
    configured = setup_logger()
    assert configured is logger
    assert path.parent.is_dir() and not path.exists()
    set_quiet(True)
    logger.info("grid ready")
    set_quiet(False)
    text = path.read_text(encoding="utf-8")
    assert "INFO" in text and "grid ready" in text
    assert "test_logger:" in text


def test_quiet_raises_console_threshold_only(tmp_path, fresh_logger):
    fresh_logger.setattr(settings, "log_file", str(tmp_path / "run.log"))
    setup_logger()
    set_quiet(True)
    levels = {type(h).__name__: h.level for h in logger.handlers}
    set_quiet(False)
    assert levels == {"StreamHandler": logging.WARNING, "RotatingFileHandler": logging.NOTSET}
