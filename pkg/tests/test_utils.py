"""Unit tests for utils module."""

import json

import pytest

from src.errors import ConfigError, InvalidArgumentError
from src.utils import TraceLogger, emit, load_config, lower_median, parse_shape, resolve_data_path


def test_load_config_explicit_path(tmp_path):
    """Test loading a config from an explicit path."""
    path = tmp_path / "cfg.yaml"
    path.write_text("random_seed: 5\npaths:\n  logs_dir: logs\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg["random_seed"] == 5
    assert cfg["paths"]["logs_dir"] == "logs"


def test_load_config_env_var(tmp_path, monkeypatch):
    """Test the environment variable is used when no path is given."""
    path = tmp_path / "env.yaml"
    path.write_text("random_seed: 9\n", encoding="utf-8")
    monkeypatch.setenv("SMILE_CNN_CONFIG", str(path))
    assert load_config()["random_seed"] == 9


def test_load_config_errors(tmp_path):
    """Test missing, unparsable and non-mapping files."""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(listing)


def test_load_config_empty_file(tmp_path):
    """Test an empty file is an empty mapping."""
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    assert load_config(path) == {}


def test_resolve_data_path_precedence(monkeypatch):
    """Test flag beats environment beats default."""
    monkeypatch.setenv("SMILE_TEST_DATA", "from_env.dset")
    assert resolve_data_path("flag.dset", "default.dset", "SMILE_TEST_DATA") == "flag.dset"
    assert resolve_data_path(None, "default.dset", "SMILE_TEST_DATA") == "from_env.dset"
    monkeypatch.delenv("SMILE_TEST_DATA")
    assert resolve_data_path(None, "default.dset", "SMILE_TEST_DATA") == "default.dset"


def test_parse_shape():
    """Test HxW parsing and rejection of malformed text."""
    assert parse_shape("28x23") == (28, 23)
    assert parse_shape("95X121") == (95, 121)
    for text in ("28", "0x5", "axb", "1x2x3"):
        with pytest.raises(InvalidArgumentError):
            parse_shape(text)


def test_lower_median():
    """Test odd counts, even counts and the empty case."""
    assert lower_median([3.0, 1.0, 2.0]) == 2.0
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    with pytest.raises(InvalidArgumentError):
        lower_median([])


def test_trace_logger_writes_jsonl(tmp_path):
    """Test events are written one JSON object per line."""
    import numpy as np

    with TraceLogger.open(tmp_path / "logs") as logger:
        logger.log("epoch_complete", {"epoch": 1, "loss": np.float64(0.5)})
        emit(logger, "train_complete", accuracy=0.9, shape=(2, 3))
        emit(None, "ignored")
        path = logger.path
    assert logger.events == 2
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    first, second = (json.loads(line) for line in lines)
    assert first["event_type"] == "epoch_complete"
    assert first["data"] == {"epoch": 1, "loss": 0.5}
    assert second["data"]["shape"] == [2, 3]
    assert "timestamp" in first


def test_trace_logger_ignores_events_after_close(tmp_path):
    """Test logging after close is a no-op."""
    logger = TraceLogger.open(tmp_path)
    logger.close()
    logger.log("late", {})
    assert logger.events == 0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
